"""
Forward simulation of the controlled McKean-Vlasov jump-SDE on a particle ensemble
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .config import Config
from .exceptions import BlowUp, DomainError
from .measure import EmpiricalMeasure
from .models import TimeGrid
from .noise import NoiseBundle
from .problem import CrossSection, JumpMeasure, LinearColumn, ModelSpec

logger = logging.getLogger(__name__)

__all__ = [
    "TimeGrid",
    "ParticleEnsemble",
    "StepJacobians",
    "simulate_forward",
    "simulate_linearized",
    "step_jacobians",
    "tangent_increment",
    "write_ensemble_csv",
]


@dataclass
class ParticleEnsemble:
    """N particles on a uniform grid with their predictable controls.

    states[k] is the state at knot k (post-jump); controls[k] acts on
    [t_k, t_{k+1}) and depends on information up to t_k. cross_sections[k]
    is what the coefficients read at knot k: the ensemble's own empirical
    summary, or a frozen baseline for pinned particles.
    """

    grid: TimeGrid
    states: np.ndarray
    controls: np.ndarray
    noise: NoiseBundle
    cross_sections: List[CrossSection] = field(default_factory=list)

    @property
    def particles(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[k])


def _check_cap(values: np.ndarray, step: int, cap: float):
    norms = np.linalg.norm(values, axis=1)
    bad = ~np.isfinite(norms) | (norms > cap)
    if np.any(bad):
        particle = int(np.argmax(bad))
        raise BlowUp(step, particle, float(norms[particle]))


def simulate_forward(
    m: ModelSpec,
    jm: JumpMeasure,
    init: EmpiricalMeasure,
    policy,
    grid: TimeGrid,
    noise: NoiseBundle,
    cap: float = Config.BLOWUP_CAP,
    frozen: Optional[Sequence[CrossSection]] = None,
) -> ParticleEnsemble:
    """Euler-Maruyama with left-point coefficients and compensated atomic jumps.

    Args:
        m: The model
        jm: Jump intensity measure
        init: Initial particles (one per noise particle)
        policy: Object with controls(k, t, states, cross) returning N x d controls
        grid: Time grid
        noise: Noise matching the grid and particle count
        cap: Blow-up threshold on |X|
        frozen: Cross-sections to read instead of the ensemble's own (pinned particles)

    Returns:
        The simulated ensemble

    Raises:
        BlowUp: If a state leaves the ball of radius cap
    """
    if init.size != noise.particles or noise.steps != grid.steps or noise.dim != m.dim_state:
        raise DomainError(
            f"noise ({noise.steps} steps, {noise.particles} particles, dim {noise.dim}) does not match "
            f"grid ({grid.steps} steps) and init ({init.size} particles, dim {m.dim_state})"
        )
    if frozen is not None and len(frozen) < grid.steps + 1:
        raise DomainError("frozen cross-sections must cover every knot")
    N, K = init.size, grid.steps
    states = np.empty((K + 1, N, m.dim_state))
    controls = np.empty((K, N, m.dim_control))
    cross_sections: List[CrossSection] = []
    X = np.array(init.points, dtype=float)
    states[0] = X
    _check_cap(X, 0, cap)

    for k in range(K):
        t = grid.time(k)
        cross = frozen[k] if frozen is not None else m.cross_section(X)
        cross_sections.append(cross)
        u = np.asarray(policy.controls(k, t, X, cross), dtype=float)
        if u.shape != (N, m.dim_control):
            raise DomainError(f"policy returned shape {u.shape}, expected {(N, m.dim_control)}")
        controls[k] = u
        X = X + m.increment(t, X, cross, u, noise.brownian[k], noise.counts[k], jm, grid.dt)
        _check_cap(X, k + 1, cap)
        states[k + 1] = X

    cross_sections.append(frozen[K] if frozen is not None else m.cross_section(X))
    return ParticleEnsemble(grid=grid, states=states, controls=controls, noise=noise, cross_sections=cross_sections)


@dataclass
class StepJacobians:
    """First derivatives of the coefficients along one step of a baseline ensemble"""

    b_x: np.ndarray
    b_v: np.ndarray
    b_m: np.ndarray
    psi_jac: np.ndarray
    columns: List[dict]
    jumps: List[tuple]


def step_jacobians(m: ModelSpec, jm: JumpMeasure, ens: ParticleEnsemble, k: int) -> StepJacobians:
    t = ens.grid.time(k)
    Y, cross = ens.states[k], ens.cross_sections[k]
    blocks = m.split_controls(ens.controls[k])
    B = m.drift_coefficient
    columns = []
    for j, column in enumerate(m.diffusion_cols, start=1):
        if isinstance(column, LinearColumn):
            columns.append({"sigma1": column.sigma1(t), "sigma2": column.sigma2(t)})
        else:
            A = column.coefficient
            columns.append(
                {
                    "a_x": A.dx(t, Y, cross.moments, blocks[j]),
                    "a_v": A.dw(t, Y, cross.moments, blocks[j]),
                    "a_m": A.dm(t, Y, cross.moments, blocks[j]),
                }
            )
    jumps = [m.jump_coefficients(t, mark)[1:] for mark in jm.marks]
    return StepJacobians(
        b_x=m.drift_dx(t, Y, cross, blocks[0]),
        b_v=m.drift_dv(t, Y, cross, blocks[0]),
        b_m=B.dm(t, Y, cross.moments, blocks[0]),
        psi_jac=m.features.jacobian(Y),
        columns=columns,
        jumps=jumps,
    )


def tangent_increment(
    m: ModelSpec,
    jac: StepJacobians,
    dY: np.ndarray,
    du: np.ndarray,
    dM: np.ndarray,
    dbar: np.ndarray,
    dB: np.ndarray,
    compensated: np.ndarray,
    dt: float,
) -> np.ndarray:
    """One step of the variational dynamics along frozen coefficients.

    dM is the perturbation of the moment vector and dbar that of the mean
    (both zero when the measure is held fixed).
    """
    blocks = m.split_controls(du)
    step = (
        np.einsum("iab,ib->ia", jac.b_x, dY)
        + jac.b_m @ dM
        + np.einsum("iab,ib->ia", jac.b_v, blocks[0])
    ) * dt
    for j, column in enumerate(jac.columns, start=1):
        if "sigma1" in column:
            loading = dY @ column["sigma1"].T + column["sigma2"] @ dbar
        else:
            loading = (
                np.einsum("iab,ib->ia", column["a_x"], dY)
                + column["a_m"] @ dM
                + np.einsum("iab,ib->ia", column["a_v"], blocks[j])
            )
        step = step + loading * dB[:, j - 1 : j]
    for a, (g1, g2) in enumerate(jac.jumps):
        step = step + (dY @ g1.T + g2 @ dbar) * compensated[:, a : a + 1]
    return step


def simulate_linearized(
    m: ModelSpec,
    jm: JumpMeasure,
    base: ParticleEnsemble,
    control_perturbation: Optional[np.ndarray],
    eta: np.ndarray,
    noise: Optional[NoiseBundle] = None,
    frozen_measure: bool = False,
    jacobians: Optional[List[StepJacobians]] = None,
    cap: float = Config.BLOWUP_CAP,
) -> np.ndarray:
    """Propagate the directional derivative D_eta Y along a baseline ensemble.

    Args:
        m: The model
        jm: Jump intensity measure
        base: Baseline ensemble (its noise is reused unless noise is given)
        control_perturbation: steps x N x d control direction, or None for zero
        eta: N x n initial direction
        noise: Noise the baseline was simulated with
        frozen_measure: Hold the measure arguments fixed (no mean-field feedback)
        jacobians: Precomputed step_jacobians for every step

    Returns:
        (steps + 1) x N x n variational states
    """
    noise = noise or base.noise
    K, N, n = base.steps, base.particles, base.dim
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (N, n))
    du = np.zeros((K, N, m.dim_control)) if control_perturbation is None else control_perturbation
    out = np.empty((K + 1, N, n))
    dY = np.array(eta)
    out[0] = dY
    for k in range(K):
        jac = jacobians[k] if jacobians is not None else step_jacobians(m, jm, base, k)
        if frozen_measure:
            dM = np.zeros(m.feature_dim)
            dbar = np.zeros(n)
        else:
            dM = np.einsum("ikb,ib->k", jac.psi_jac, dY) / N
            dbar = dY.mean(axis=0)
        dY = dY + tangent_increment(
            m, jac, dY, du[k], dM, dbar, noise.brownian[k], noise.compensated(k), base.grid.dt
        )
        _check_cap(dY, k + 1, cap)
        out[k + 1] = dY
    return out


def write_ensemble_csv(
    ens: ParticleEnsemble, path: Union[str, Path], tags: Optional[np.ndarray] = None
) -> Path:
    """Dump states and controls as rows (step, time, particle, [tag,] x_1..x_n, v_1..v_d).

    The terminal knot carries no control; its control columns are NaN.
    """
    path = Path(path)
    K, N, n = ens.states.shape
    d = ens.controls.shape[2]
    steps = np.repeat(np.arange(K), N)
    times = ens.grid.times[steps]
    particles = np.tile(np.arange(N), K)
    controls = np.concatenate([ens.controls, np.full((1, N, d), np.nan)], axis=0).reshape(-1, d)
    columns = [steps[:, None], times[:, None], particles[:, None]]
    header = ["step", "time", "particle"]
    if tags is not None:
        columns.append(np.tile(np.asarray(tags), K)[:, None])
        header.append("tag")
    columns += [ens.states.reshape(-1, n), controls]
    header += [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(d)]
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.hstack(columns), delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    logger.info(f"Wrote ensemble to {path}")
    return path
