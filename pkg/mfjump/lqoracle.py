"""
Closed-form linear-quadratic oracle: Riccati coefficients and brute-force policy validation
"""

import itertools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, validator
from scipy.integrate import solve_ivp
from tqdm import tqdm

from .config import Config
from .control import FeedbackPolicy
from .costs import particle_costs
from .exceptions import RiccatiBlowUp
from .measure import EmpiricalMeasure
from .models import TimeGrid
from .noise import NoiseBundle
from .problem import JumpMeasure, ModelSpec, affine_model
from .simulator import simulate_forward

logger = logging.getLogger(__name__)


class LQJump(BaseModel):
    """One jump atom: intensity lambda at a mark, jump size gamma0 + gamma1 x + gamma2 mean"""

    mark: float = 1.0
    intensity: float = Field(gt=0.0)
    gamma0: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0


class LQSpec(BaseModel):
    """Scalar linear-quadratic problem.

    b = a x + abar mean + c v, sigma = sigma0 + sigma1 x + sigma2 mean,
    f = q x^2/2 + qbar mean^2/2 + r v^2/2, g = h x^2/2 + hbar mean^2/2.
    """

    a: float = 0.0
    abar: float = 0.0
    c: float = 1.0
    sigma0: float = 0.0
    sigma1: float = 0.0
    sigma2: float = 0.0
    q: float = 1.0
    qbar: float = 0.0
    r: float = Field(default=1.0, gt=0.0)
    h: float = 0.0
    hbar: float = 0.0
    jumps: List[LQJump] = Field(default_factory=list)

    class Config:
        extra = "forbid"

    @validator("qbar")
    def validate_convexity(cls, v, values):
        """Validate q + qbar >= 0"""
        q = values.get("q")
        if q is not None and q + v < 0.0:
            raise ValueError(f"q + qbar must be non-negative, got {q + v}")
        return v

    def jump_measure(self) -> JumpMeasure:
        return JumpMeasure([([j.mark], j.intensity) for j in self.jumps])

    def jump_sums(self) -> dict:
        """Intensity-weighted products sum_a lambda_a gamma_i gamma_j"""
        sums = {}
        for i, j in itertools.combinations_with_replacement((0, 1, 2), 2):
            sums[f"{i}{j}"] = sum(z.intensity * getattr(z, f"gamma{i}") * getattr(z, f"gamma{j}") for z in self.jumps)
        return sums

    def to_model(self) -> Tuple[ModelSpec, JumpMeasure]:
        """The same problem as a particle model with its jump measure"""
        jm = self.jump_measure()
        jumps = [(z.gamma0, z.gamma1, z.gamma2) for z in self.jumps]
        m = affine_model(
            self.a,
            self.abar,
            self.c,
            self.sigma0,
            self.sigma1,
            self.sigma2,
            q=self.q,
            qbar=self.qbar,
            r=self.r,
            h=self.h,
            hbar=self.hbar,
            jm=jm,
            jumps=jumps or None,
        )
        return m, jm


class RiccatiSolution:
    """Coefficients of V(t, mu) = p Var/2 + (p + pi) mean^2/2 + s mean + kappa on a grid"""

    def __init__(self, spec: LQSpec, grid: TimeGrid, p, pi, s, kappa):
        self.spec = spec
        self.grid = grid
        self.p = np.asarray(p)
        self.pi = np.asarray(pi)
        self.s = np.asarray(s)
        self.kappa = np.asarray(kappa)

    def value(self, k: int, mu: EmpiricalMeasure) -> float:
        mean = float(mu.points[:, 0].mean())
        var = float(mu.points[:, 0].var())
        Pi = self.p[k] + self.pi[k]
        return float(0.5 * self.p[k] * var + 0.5 * Pi * mean**2 + self.s[k] * mean + self.kappa[k])

    def adjoint(self, k: int, x: np.ndarray, mean: float) -> np.ndarray:
        """P = p x + pi mean + s"""
        return self.p[k] * np.asarray(x) + self.pi[k] * mean + self.s[k]

    def feedback(self, k: int, x: np.ndarray, mean: float) -> np.ndarray:
        return -(self.spec.c / self.spec.r) * self.adjoint(k, x, mean)

    def gains(self, k: int) -> Tuple[float, float, float]:
        """(k_x, k_mean, k_0) with v = k_x x + k_mean mean + k_0"""
        scale = -self.spec.c / self.spec.r
        return float(scale * self.p[k]), float(scale * self.pi[k]), float(scale * self.s[k])


def _riccati_rhs(spec: LQSpec):
    k = spec.c**2 / spec.r
    a, abar = spec.a, spec.abar
    s0, s1, s2 = spec.sigma0, spec.sigma1, spec.sigma2
    lam = spec.jump_sums()

    def rhs(t, y):
        p, pi, s, _ = y
        Pi = p + pi
        dp = -2.0 * a * p + k * p**2 - (s1**2 + lam["11"]) * p - spec.q
        dpi = (
            -2.0 * abar * p
            - 2.0 * (a + abar) * pi
            + k * (2.0 * p * pi + pi**2)
            - p * (2.0 * s1 * s2 + s2**2 + 2.0 * lam["12"] + lam["22"])
            - spec.qbar
        )
        ds = k * Pi * s - (a + abar) * s - p * (s0 * (s1 + s2) + lam["01"] + lam["02"])
        dkappa = -0.5 * p * (s0**2 + lam["00"]) + 0.5 * k * s**2
        return [dp, dpi, ds, dkappa]

    return rhs


def solve_riccati(spec: LQSpec, grid: TimeGrid) -> RiccatiSolution:
    """Integrate the coefficient system backward from (h, hbar, 0, 0) at T.

    The system is integrated with an adaptive eighth-order Runge-Kutta
    scheme on a grid RICCATI_REFINEMENT times finer and sampled at the knots.

    Raises:
        RiccatiBlowUp: If |p| or |p + pi| exceeds RICCATI_CAP or the integration fails
    """

    def escape(t, y):
        return Config.RICCATI_CAP - max(abs(y[0]), abs(y[0] + y[1]))

    escape.terminal = True
    fine = np.linspace(grid.T, grid.t0, grid.steps * Config.RICCATI_REFINEMENT + 1)
    result = solve_ivp(
        _riccati_rhs(spec),
        (grid.T, grid.t0),
        [spec.h, spec.hbar, 0.0, 0.0],
        method="DOP853",
        t_eval=fine,
        events=escape,
        rtol=1e-11,
        atol=1e-12,
    )
    if result.status != 0 or result.y.shape[1] != fine.size or not np.all(np.isfinite(result.y)):
        where = result.t[-1] if result.t.size else grid.T
        raise RiccatiBlowUp(f"Riccati coefficients escape near t={where:.4g}: {result.message}")
    knots = result.y[:, ::-1][:, :: Config.RICCATI_REFINEMENT]
    logger.debug(f"Riccati solved: p(t0)={knots[0, 0]:.6g}, pi(t0)={knots[1, 0]:.6g}")
    return RiccatiSolution(spec, grid, knots[0], knots[1], knots[2], knots[3])


# ---------------------------------------------------------------------------
# Brute-force validation
# ---------------------------------------------------------------------------


class PolicyEvaluation(BaseModel):
    gains: Tuple[float, float, float]
    cost: float
    standard_error: float


class OracleValidation(BaseModel):
    """Comparison of the Riccati value with the best constant affine feedback found by search"""

    value: float
    best_cost: float
    best_gains: Tuple[float, float, float]
    standard_error: float
    neighbour_spread: float
    passes: bool


def affine_policy(kx: float, kmean: float, k0: float) -> FeedbackPolicy:
    return FeedbackPolicy.explicit(lambda k, t, X, cross: kx * X + kmean * cross.mean + k0)


def evaluate_affine_policy(
    m: ModelSpec, jm: JumpMeasure, init: EmpiricalMeasure, grid: TimeGrid, noise: NoiseBundle, gains
) -> PolicyEvaluation:
    ens = simulate_forward(m, jm, init, affine_policy(*gains), grid, noise)
    costs = particle_costs(m, ens)
    return PolicyEvaluation(
        gains=tuple(float(g) for g in gains),
        cost=float(costs.mean()),
        standard_error=float(costs.std(ddof=1) / np.sqrt(len(costs))) if len(costs) > 1 else 0.0,
    )


def policy_search(
    spec: LQSpec,
    grid: TimeGrid,
    init: EmpiricalMeasure,
    gains: Sequence[Sequence[float]],
    seed: int = 0,
    show_progress: bool = False,
) -> List[PolicyEvaluation]:
    """Cost of every constant affine feedback v = k_x x + k_mean mean + k_0 on common noise"""
    m, jm = spec.to_model()
    noise = NoiseBundle.generate(seed, init.size, grid, 1, jm.weights, stream="policy_search")
    return [
        evaluate_affine_policy(m, jm, init, grid, noise, g)
        for g in tqdm(gains, desc="Policy search", disable=not show_progress)
    ]


def validate_oracle(
    spec: LQSpec,
    grid: TimeGrid,
    init: EmpiricalMeasure,
    axes: Tuple[Sequence[float], Sequence[float], Sequence[float]],
    seed: int = 0,
    riccati: Optional[RiccatiSolution] = None,
) -> OracleValidation:
    """Search the cartesian grid of gains in axes and compare with the Riccati value.

    Passes when |J_best - V| <= neighbour spread + 3 SE and V <= J_best + 3 SE,
    the spread being the largest cost gap between the best gains and their
    grid neighbours.
    """
    riccati = riccati or solve_riccati(spec, grid)
    shape = tuple(len(axis) for axis in axes)
    candidates = list(itertools.product(*axes))
    results = policy_search(spec, grid, init, candidates, seed)
    costs = np.array([r.cost for r in results]).reshape(shape)
    best = np.unravel_index(int(np.argmin(costs)), shape)
    best_result = results[int(np.ravel_multi_index(best, shape))]

    spread = 0.0
    for axis in range(3):
        for offset in (-1, 1):
            neighbour = list(best)
            neighbour[axis] += offset
            if 0 <= neighbour[axis] < shape[axis]:
                spread = max(spread, abs(costs[tuple(neighbour)] - best_result.cost))

    value = riccati.value(0, init)
    se = best_result.standard_error
    passes = abs(best_result.cost - value) <= spread + 3.0 * se and value <= best_result.cost + 3.0 * se
    logger.info(f"Oracle validation: V={value:.6g}, best J={best_result.cost:.6g} at {best_result.gains}")
    return OracleValidation(
        value=value,
        best_cost=best_result.cost,
        best_gains=best_result.gains,
        standard_error=se,
        neighbour_spread=float(spread),
        passes=bool(passes),
    )
