"""
A-priori estimates of the forward-backward system turned into measurable constants
"""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class StabilityMetrics(BaseModel):
    """Container for the monitor constants of one solve"""

    moment_constant: float = 0.0
    energy_constant: float = 0.0
    time_continuity_constant: float = 0.0
    s_norm: float = 0.0


def _initial_energy(states: np.ndarray) -> float:
    return 1.0 + float(np.mean(np.sum(states[0] ** 2, axis=1)))


def moment_constant(states: np.ndarray) -> float:
    """max_k E|Y_k|^2 / (1 + E|Y_0|^2)"""
    second = np.mean(np.sum(states**2, axis=2), axis=1)
    return float(second.max() / _initial_energy(states))


def s_norm(
    states: np.ndarray,
    P: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    controls: np.ndarray,
    dt: float,
    intensities: Optional[Sequence[float]] = None,
) -> float:
    """Norm of a solution (or of a difference of two solutions).

    Squared, it is sup_k E|Y_k|^2 + sup_k E|P_k|^2 plus the dt-sums of
    E|Q_k|^2, E|u_k|^2 and sum_a lambda_a E|R_k^a|^2.
    """
    sup_Y = np.mean(np.sum(states**2, axis=2), axis=1).max()
    sup_P = np.mean(np.sum(P**2, axis=2), axis=1).max()
    integral = dt * np.mean(np.sum(Q**2, axis=(2, 3)), axis=1).sum()
    integral += dt * np.mean(np.sum(controls**2, axis=2), axis=1).sum()
    if R.shape[2] and intensities is not None:
        weights = np.asarray(intensities, dtype=float)
        integral += dt * np.mean(np.einsum("kiab,a->ki", R**2, weights), axis=1).sum()
    return float(np.sqrt(sup_Y + sup_P + integral))


def solution_s_norm(ens, adj, other_ens=None, other_adj=None) -> float:
    """Norm of (ens, adj), or of its difference with a second solution on the same grid"""
    if other_ens is None:
        return s_norm(ens.states, adj.P, adj.Q, adj.R, ens.controls, ens.grid.dt, ens.noise.intensities)
    return s_norm(
        ens.states - other_ens.states,
        adj.P - other_adj.P,
        adj.Q - other_adj.Q,
        adj.R - other_adj.R,
        ens.controls - other_ens.controls,
        ens.grid.dt,
        ens.noise.intensities,
    )


def energy_constant(ens, adj) -> float:
    """Squared norm of the solution over 1 + E|Y_0|^2"""
    return solution_s_norm(ens, adj) ** 2 / _initial_energy(ens.states)


def time_continuity_constant(states: np.ndarray, dt: float) -> float:
    """max_k E|Y_{k+1} - Y_k|^2 / dt"""
    increments = np.mean(np.sum(np.diff(states, axis=0) ** 2, axis=2), axis=1)
    return float(increments.max() / dt) if increments.size else 0.0


def value_growth_constant(values: Sequence[float], norms: Sequence[float]) -> float:
    """max |V(mu)| / (1 + |mu|_2^2) over sampled measures"""
    values = np.abs(np.asarray(values, dtype=float))
    norms = np.asarray(norms, dtype=float)
    return float(np.max(values / (1.0 + norms**2))) if values.size else 0.0


def stability_metrics(ens, adj) -> StabilityMetrics:
    metrics = StabilityMetrics(
        moment_constant=moment_constant(ens.states),
        energy_constant=energy_constant(ens, adj),
        time_continuity_constant=time_continuity_constant(ens.states, ens.grid.dt),
        s_norm=solution_s_norm(ens, adj),
    )
    logger.debug(f"Stability metrics: {metrics.model_dump()}")
    return metrics
