"""
Small problems shared by the test modules
"""

from mfjump.lqoracle import LQSpec
from mfjump.measure import EmpiricalMeasure
from mfjump.models import SolveConfig
from mfjump.problem import AffineMap


class FirstOrderDrift(AffineMap):
    """Affine drift that withholds its second derivatives"""

    has_second_derivatives = False

    def dxx(self, t, x, M, w):
        self._missing("dxx")


def small_config(particles: int = 200, steps: int = 10, **update) -> SolveConfig:
    """A solve that finishes in well under a second"""
    settings = dict(particles=particles, steps=steps, tol_control=1e-7, max_picard=200, threads=1, damping=0.5)
    settings.update(update)
    return SolveConfig(**settings)


def deterministic_lq(**update) -> LQSpec:
    """x' = v with (x^2 + v^2)/2 running and x^2/2 terminal cost, so p = 1 and pi = s = 0"""
    fields = dict(a=0.0, abar=0.0, c=1.0, sigma0=0.0, q=1.0, qbar=0.0, r=1.0, h=1.0, hbar=0.0)
    fields.update(update)
    return LQSpec(**fields)


def gaussian_cloud(particles: int = 200, mean: float = 0.5, std: float = 0.5, seed: int = 3) -> EmpiricalMeasure:
    return EmpiricalMeasure.gaussian([mean], [std], particles, seed=seed)
