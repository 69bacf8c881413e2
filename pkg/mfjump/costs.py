"""
Empirical costs of a simulated particle ensemble
"""

from typing import Optional

import numpy as np

from .measure import EmpiricalMeasure
from .problem import ModelSpec
from .simulator import ParticleEnsemble


def running_costs(m: ModelSpec, ens: ParticleEnsemble, stop: Optional[int] = None) -> np.ndarray:
    """Per-particle left-point Riemann sum of the running cost over the first stop steps"""
    stop = ens.steps if stop is None else stop
    total = np.zeros(ens.particles)
    for k in range(stop):
        total += m.running_cost(ens.grid.time(k), ens.states[k], ens.cross_sections[k], ens.controls[k])
    return total * ens.grid.dt


def particle_costs(m: ModelSpec, ens: ParticleEnsemble) -> np.ndarray:
    """Running plus terminal cost of every particle"""
    terminal = m.terminal(ens.states[-1], ens.cross_sections[-1])
    return running_costs(m, ens) + terminal


def evaluate_cost(m: ModelSpec, ens: ParticleEnsemble) -> float:
    """Empirical cost (1/N) sum_i [sum_k f(t_k, Y_k^i, mu_k, u_k^i) dt + g(Y_T^i, mu_T)]"""
    return float(particle_costs(m, ens).mean())


def terminal_value(m: ModelSpec, mu: EmpiricalMeasure) -> float:
    """V(T, mu) = integral of g(x, mu) mu(dx)"""
    return float(m.terminal(mu.points, m.cross_section(mu.points)).mean())
