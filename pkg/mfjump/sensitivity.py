"""
Variational flows along a solved system: Gateaux derivatives, pinned particles and their state Jacobians
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .adjoint import AdjointEnsemble
from .config import Config
from .control import cone_margins
from .evaluation.monitors import s_norm
from .exceptions import DomainError
from .measure import EmpiricalMeasure
from .models import ConeMarginReport, RegressionConfig, SolveConfig
from .noise import NoiseBundle
from .problem import ControlledColumn, ControlledMap, JumpMeasure, ModelSpec, ScalarCost
from .regression import GroupMeanProjector, RidgeProjector
from .simulator import (
    ParticleEnsemble,
    StepJacobians,
    simulate_linearized,
    step_jacobians,
    write_ensemble_csv,
)
from .solver import MFTCSolution, control_change, picard_solve

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Second-order coefficients along a baseline
# ---------------------------------------------------------------------------


@dataclass
class MapDerivatives:
    """First and second derivatives of one controlled map at every particle of a step"""

    dx: np.ndarray
    dw: np.ndarray
    dm: np.ndarray
    dxx: np.ndarray
    dxw: np.ndarray
    dww: np.ndarray
    dxm: np.ndarray
    dwm: np.ndarray
    dmm: np.ndarray

    @classmethod
    def evaluate(cls, F: ControlledMap, t: float, x: np.ndarray, M: np.ndarray, w: np.ndarray) -> "MapDerivatives":
        return cls(
            dx=F.dx(t, x, M, w),
            dw=F.dw(t, x, M, w),
            dm=F.dm(t, x, M, w),
            dxx=F.dxx(t, x, M, w),
            dxw=F.dxw(t, x, M, w),
            dww=F.dww(t, x, M, w),
            dxm=F.dxm(t, x, M, w),
            dwm=F.dwm(t, x, M, w),
            dmm=F.dmm(t, x, M, w),
        )

    def linearized_dx(self, dY: np.ndarray, dw: np.ndarray, dM: np.ndarray) -> np.ndarray:
        """Perturbation of F_x: (N, n, n)"""
        return (
            np.einsum("iabc,ic->iab", self.dxx, dY)
            + np.einsum("iabe,ie->iab", self.dxw, dw)
            + np.einsum("iabk,k->iab", self.dxm, dM)
        )

    def linearized_dm(self, dY: np.ndarray, dw: np.ndarray, dM: np.ndarray) -> np.ndarray:
        """Perturbation of F_M: (N, n, K)"""
        return (
            np.einsum("iabk,ib->iak", self.dxm, dY)
            + np.einsum("iaek,ie->iak", self.dwm, dw)
            + np.einsum("iakl,l->iak", self.dmm, dM)
        )

    def linearized_dw(self, dY: np.ndarray, dw: np.ndarray, dM: np.ndarray) -> np.ndarray:
        """Perturbation of F_w: (N, n, dw)"""
        return (
            np.einsum("iabe,ib->iae", self.dxw, dY)
            + np.einsum("iaef,if->iae", self.dww, dw)
            + np.einsum("iaek,k->iae", self.dwm, dM)
        )


@dataclass
class CostDerivatives:
    """Second derivatives of one running cost term at every particle of a step"""

    dxx: np.ndarray
    dxw: np.ndarray
    dww: np.ndarray
    dxm: np.ndarray
    dwm: np.ndarray
    dmm: np.ndarray

    @classmethod
    def evaluate(cls, f: ScalarCost, t: float, x: np.ndarray, M: np.ndarray, w: np.ndarray) -> "CostDerivatives":
        return cls(
            dxx=f.dxx(t, x, M, w),
            dxw=f.dxw(t, x, M, w),
            dww=f.dww(t, x, M, w),
            dxm=f.dxm(t, x, M, w),
            dwm=f.dwm(t, x, M, w),
            dmm=f.dmm(t, x, M, w),
        )

    def linearized_dx(self, dY, dw, dM) -> np.ndarray:
        return np.einsum("ibc,ic->ib", self.dxx, dY) + np.einsum("ibe,ie->ib", self.dxw, dw) + self.dxm @ dM

    def linearized_dm(self, dY, dw, dM) -> np.ndarray:
        return np.einsum("ibk,ib->ik", self.dxm, dY) + np.einsum("iek,ie->ik", self.dwm, dw) + self.dmm @ dM

    def linearized_dw(self, dY, dw, dM) -> np.ndarray:
        return np.einsum("ibe,ib->ie", self.dxw, dY) + np.einsum("ief,if->ie", self.dww, dw) + self.dwm @ dM


@dataclass
class SecondOrderStep:
    """Everything the tangent system reads at one step of the baseline"""

    first: StepJacobians
    drift: MapDerivatives
    columns: List[Optional[MapDerivatives]]
    costs: List[Optional[CostDerivatives]]
    psi_hess: np.ndarray


def second_order_steps(m: ModelSpec, jm: JumpMeasure, ens: ParticleEnsemble) -> List[SecondOrderStep]:
    """Evaluate the second-derivative callbacks once per step of ens"""
    steps = []
    for k in range(ens.steps):
        t = ens.grid.time(k)
        Y, M = ens.states[k], ens.cross_sections[k].moments
        blocks = m.split_controls(ens.controls[k])
        columns = [
            MapDerivatives.evaluate(c.coefficient, t, Y, M, blocks[j]) if isinstance(c, ControlledColumn) else None
            for j, c in enumerate(m.diffusion_cols, start=1)
        ]
        costs = [
            None if f is None else CostDerivatives.evaluate(f, t, Y, M, blocks[j])
            for j, f in enumerate(m.running_cost_terms)
        ]
        steps.append(
            SecondOrderStep(
                first=step_jacobians(m, jm, ens, k),
                drift=MapDerivatives.evaluate(m.drift_coefficient, t, Y, M, blocks[0]),
                columns=columns,
                costs=costs,
                psi_hess=m.features.hessian(Y),
            )
        )
    return steps


# ---------------------------------------------------------------------------
# The tangent forward-backward system
# ---------------------------------------------------------------------------


def _tangent_terminal(m: ModelSpec, ens: ParticleEnsemble, adj: AdjointEnsemble, dY: np.ndarray, frozen: bool):
    g = m.terminal_cost
    Y, M = ens.states[-1], ens.cross_sections[-1].moments
    psi_jac = m.features.jacobian(Y)
    psi_hess = m.features.hessian(Y)
    dM = np.zeros(m.feature_dim) if frozen else np.einsum("ikb,ib->k", psi_jac, dY) / len(Y)
    g_xm = g.dxm(Y, M)
    dP = np.einsum("ibc,ic->ib", g.dxx(Y, M), dY) + g_xm @ dM
    dP = dP + np.einsum("ikbc,ic,k->ib", psi_hess, dY, adj.terminal_moments)
    if not frozen:
        d_gm = (np.einsum("ibk,ib->ik", g_xm, dY) + g.dmm(Y, M) @ dM).mean(axis=0)
        dP = dP + np.einsum("ikb,k->ib", psi_jac, d_gm)
    return dP


def _tangent_backward(
    m: ModelSpec,
    jm: JumpMeasure,
    ens: ParticleEnsemble,
    adj: AdjointEnsemble,
    cache: List[SecondOrderStep],
    dY: np.ndarray,
    du: np.ndarray,
    frozen: bool,
    regression: RegressionConfig,
    groups: Optional[np.ndarray],
):
    """Backward regression for (dP, dQ, dR) given the tangent states and controls"""
    K, N, n = ens.steps, ens.particles, ens.dim
    A = jm.size
    dt = ens.grid.dt
    noise = ens.noise
    dP = np.empty((K + 1, N, n))
    dQ = np.zeros((K, N, n, n))
    dR = np.zeros((K, N, A, n))
    dP[K] = _tangent_terminal(m, ens, adj, dY[K], frozen)

    for k in range(K - 1, -1, -1):
        t = ens.grid.time(k)
        step = cache[k]
        if k == 0 and groups is not None:
            projector = GroupMeanProjector(groups)
        else:
            projector = RidgeProjector(regression).fit(np.hstack([ens.states[k], dY[k]]))
        dE = projector.project(dP[k + 1])
        innovation = dP[k + 1] - dE
        dQ[k] = projector.project(innovation[:, :, None] * noise.brownian[k][:, None, :] / dt)
        for a, weight in enumerate(jm.weights):
            jumps = (noise.counts[k, :, a] - weight * dt) / (weight * dt)
            dR[k, :, a] = projector.project(innovation * jumps[:, None])

        E, Q, R = adj.P_cond[k], adj.Q[k], adj.R[k]
        y = dY[k]
        blocks = m.split_controls(du[k])
        dM = np.zeros(m.feature_dim) if frozen else np.einsum("ikb,ib->k", step.first.psi_jac, y) / N

        driver = np.einsum("iab,ia->ib", step.drift.dx, dE)
        driver += np.einsum("iab,ia->ib", step.drift.linearized_dx(y, blocks[0], dM), E)
        moments = np.einsum("iak,ia->ik", step.drift.dm, dE)
        moments += np.einsum("iak,ia->ik", step.drift.linearized_dm(y, blocks[0], dM), E)
        linear = np.zeros(n)
        for j, column in enumerate(m.diffusion_cols, start=1):
            derivs = step.columns[j - 1]
            if derivs is None:
                driver += dQ[k, :, :, j - 1] @ column.sigma1(t)
                linear += column.sigma2(t).T @ dQ[k, :, :, j - 1].mean(axis=0)
            else:
                q, dq = Q[:, :, j - 1], dQ[k, :, :, j - 1]
                driver += np.einsum("iab,ia->ib", derivs.dx, dq)
                driver += np.einsum("iab,ia->ib", derivs.linearized_dx(y, blocks[j], dM), q)
                moments += np.einsum("iak,ia->ik", derivs.dm, dq)
                moments += np.einsum("iak,ia->ik", derivs.linearized_dm(y, blocks[j], dM), q)
        for a, (g1, g2) in enumerate(step.first.jumps):
            weight = jm.weights[a]
            driver += weight * dR[k, :, a] @ g1
            linear += weight * g2.T @ dR[k, :, a].mean(axis=0)
        for j, costs in enumerate(step.costs):
            if costs is not None:
                driver += costs.linearized_dx(y, blocks[j], dM)
                moments += costs.linearized_dm(y, blocks[j], dM)

        driver += np.einsum("ikbc,ic,k->ib", step.psi_hess, y, adj.mf_moments[k])
        if not frozen:
            driver += np.einsum("ikb,k->ib", step.first.psi_jac, moments.mean(axis=0)) + linear
        dP[k] = dE + dt * driver
    return dP, dQ, dR


def _tangent_feedback(
    m: ModelSpec,
    ens: ParticleEnsemble,
    adj: AdjointEnsemble,
    cache: List[SecondOrderStep],
    dY: np.ndarray,
    dP: np.ndarray,
    dQ: np.ndarray,
    frozen: bool,
) -> np.ndarray:
    """Solve the linearized first-order conditions for the control perturbation.

    For the drift block, J dv^0 = -[B_v^T dP + (dB_v)^T P + df^0_v] with
    J = sum_a P_a B_vv[a] + f^0_vv and the perturbations of B_v and f^0_v
    taken in the state and the moments only. Controlled columns are
    analogous with Q^j in place of P.
    """
    K, N = ens.steps, ens.particles
    slices = m.control_slices
    du = np.zeros((K, N, m.dim_control))
    zero_w = [np.zeros((N, dj)) for dj in m.control_split]
    for k in range(K):
        step = cache[k]
        y = dY[k]
        dM = np.zeros(m.feature_dim) if frozen else np.einsum("ikb,ib->k", step.first.psi_jac, y) / N
        pairs = [(0, step.drift, adj.P[k], dP[k])]
        pairs += [(j, step.columns[j - 1], adj.Q[k, :, :, j - 1], dQ[k, :, :, j - 1]) for j in m.controlled_columns]
        for j, derivs, p, dp in pairs:
            costs = step.costs[j]
            J = np.einsum("iaef,ia->ief", derivs.dww, p) + costs.dww
            rhs = np.einsum("iae,ia->ie", derivs.dw, dp)
            rhs += np.einsum("iae,ia->ie", derivs.linearized_dw(y, zero_w[j], dM), p)
            rhs += costs.linearized_dw(y, zero_w[j], dM)
            du[k][:, slices[j]] = np.linalg.solve(J, -rhs[..., None])[..., 0]
    return du


@dataclass
class JacobianFlow:
    """Directional derivative of the solution along a perturbation of the initial condition"""

    eta: np.ndarray
    dY: np.ndarray
    dP: np.ndarray
    dQ: np.ndarray
    dR: np.ndarray
    du: np.ndarray
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)
    boundedness: Optional[float] = None


def _linear_flow(
    m: ModelSpec,
    jm: JumpMeasure,
    ens: ParticleEnsemble,
    adj: AdjointEnsemble,
    eta: np.ndarray,
    cfg: SolveConfig,
    frozen: bool,
    groups: Optional[np.ndarray] = None,
    cache: Optional[List[SecondOrderStep]] = None,
) -> JacobianFlow:
    """Pure Picard on the tangent system, falling back to damping 1/2 if the change keeps growing"""
    cache = cache or second_order_steps(m, jm, ens)
    jacobians = [step.first for step in cache]
    dt = ens.grid.dt
    du = np.zeros_like(ens.controls)
    rho = 1.0
    history: List[float] = []
    growing = 0
    converged = False
    for iteration in range(1, cfg.linear_max_iter + 1):
        dY = simulate_linearized(m, jm, ens, du, eta, frozen_measure=frozen, jacobians=jacobians, cap=cfg.blowup_cap)
        dP, dQ, dR = _tangent_backward(m, jm, ens, adj, cache, dY, du, frozen, cfg.regression, groups)
        du_new = _tangent_feedback(m, ens, adj, cache, dY, dP, dQ, frozen)
        change = rho * control_change(du_new - du, dt)
        scale = control_change(du_new, dt)
        history.append(change)
        logger.debug(f"Linear flow iteration {iteration}: change={change:.3e}")
        if change == 0.0 or change <= cfg.linear_tol * scale:
            converged = True
            break
        growing = growing + 1 if len(history) > 1 and change > history[-2] else 0
        if growing >= 3 and rho == 1.0:
            logger.warning(
                f"Linear flow diverging at iteration {iteration}, damping with {Config.LINEAR_FLOW_FALLBACK_DAMPING}"
            )
            rho = Config.LINEAR_FLOW_FALLBACK_DAMPING
            growing = 0
        du = du + rho * (du_new - du)

    if not converged:
        logger.warning(f"Linear flow stopped after {cfg.linear_max_iter} iterations (last change {history[-1]:.3e})")
    eta_norm = float(np.sqrt(np.mean(np.sum(np.asarray(eta) ** 2, axis=-1))))
    size = s_norm(dY, dP, dQ, dR, du, dt, jm.weights)
    return JacobianFlow(
        eta=np.broadcast_to(eta, dY[0].shape).copy(),
        dY=dY,
        dP=dP,
        dQ=dQ,
        dR=dR,
        du=du,
        iterations=len(history),
        converged=converged,
        history=history,
        boundedness=size / eta_norm if eta_norm > 0.0 else None,
    )


def solve_jacobian_flow(
    m: ModelSpec, jm: JumpMeasure, base: MFTCSolution, eta: np.ndarray, cfg: Optional[SolveConfig] = None
) -> JacobianFlow:
    """Gateaux derivative of the solution in the direction eta (one row per particle).

    The tangent system is solved along the baseline with the same noise:
    forward by simulate_linearized, backward by regression on the pair
    (Y_k, dY_k), and the control perturbation from the linearized
    first-order conditions.

    Raises:
        MissingDerivatives: If a coefficient lacks second-derivative callbacks
    """
    m.require_second_derivatives("solve_jacobian_flow")
    cfg = cfg or SolveConfig()
    ens, adj = base[0], base[1]
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (ens.particles, ens.dim))
    flow = _linear_flow(m, jm, ens, adj, eta, cfg, frozen=False)
    logger.info(f"Jacobian flow: {flow.iterations} iterations, boundedness {flow.boundedness}")
    return flow


# ---------------------------------------------------------------------------
# Pinned particles
# ---------------------------------------------------------------------------


def _average_copies(values: np.ndarray, copies: int) -> np.ndarray:
    return values.reshape((values.shape[0] // copies, copies) + values.shape[1:]).mean(axis=1)


@dataclass
class PinnedFlow:
    """Tagged particles started at given points and reading the baseline measure.

    Each tag is simulated copies times with its own noise; initial_* hold
    the per-tag averages at the first knot.
    """

    tags: np.ndarray
    copies: int
    ensemble: ParticleEnsemble
    adjoint: AdjointEnsemble
    history: List[float]
    converged: bool
    initial_adjoint: np.ndarray
    initial_Q: np.ndarray
    initial_R: np.ndarray
    initial_control: np.ndarray
    cone: ConeMarginReport

    @property
    def tag_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.tags)), self.copies)

    def per_tag(self, values: np.ndarray) -> np.ndarray:
        """Average over the copies of each tag"""
        return _average_copies(values, self.copies)


def pinned_noise(m: ModelSpec, jm: JumpMeasure, particles: int, cfg: SolveConfig) -> NoiseBundle:
    return NoiseBundle.generate(
        cfg.seed, particles, cfg.grid(), m.dim_state, jm.weights, stream="pinned", threads=cfg.threads
    )


def solve_pinned_flow(
    m: ModelSpec,
    jm: JumpMeasure,
    base: MFTCSolution,
    ys: np.ndarray,
    cfg: Optional[SolveConfig] = None,
    copies: Optional[int] = None,
    noise: Optional[NoiseBundle] = None,
    warm_start: Optional[np.ndarray] = None,
) -> PinnedFlow:
    """Solve the system of particles started at ys whose coefficients read the baseline law.

    The tagged particles carry no weight in the measure: every cross-section
    is the baseline's, and the mean-field parts of the adjoint driver reuse
    the baseline averages.

    Args:
        m: The model
        jm: Jump intensity measure
        base: Converged baseline solution
        ys: M x n initial points
        cfg: Solve settings (grid must match the baseline)
        copies: Copies per tag (cfg.pinned_copies by default)
        noise: Noise for the M * copies particles (stream "pinned" by default)
        warm_start: Initial control field for the tagged particles
    """
    cfg = cfg or SolveConfig()
    ens, adj = base[0], base[1]
    if cfg.grid() != ens.grid:
        raise DomainError("pinned flows must use the baseline grid")
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if ys.shape[1] != m.dim_state:
        raise DomainError(f"tags must have {m.dim_state} columns, got {ys.shape[1]}")
    copies = copies or cfg.pinned_copies
    init = EmpiricalMeasure(np.repeat(ys, copies, axis=0))
    noise = noise or pinned_noise(m, jm, init.size, cfg)
    groups = np.repeat(np.arange(len(ys)), copies) if copies > 1 else None

    pinned_ens, pinned_adj, history, converged = picard_solve(
        m,
        jm,
        init,
        cfg,
        noise,
        warm_start=warm_start,
        frozen=ens.cross_sections,
        averages=adj,
        groups=groups,
        label="Pinned",
    )
    if not converged:
        logger.warning(f"Pinned flow did not converge in {cfg.max_picard} iterations")

    return PinnedFlow(
        tags=ys,
        copies=copies,
        ensemble=pinned_ens,
        adjoint=pinned_adj,
        history=history,
        converged=converged,
        initial_adjoint=_average_copies(pinned_adj.P[0], copies),
        initial_Q=_average_copies(pinned_adj.Q[0], copies),
        initial_R=_average_copies(pinned_adj.R[0], copies),
        initial_control=_average_copies(pinned_ens.controls[0], copies),
        cone=cone_margins(m, pinned_ens, pinned_adj),
    )


@dataclass
class PinnedJacobian:
    """State Jacobian of a pinned flow: one frozen-measure tangent flow per coordinate"""

    flows: List[JacobianFlow]
    initial_dP: np.ndarray
    initial_du: np.ndarray


def solve_pinned_jacobian(
    m: ModelSpec, jm: JumpMeasure, base: MFTCSolution, pinned: PinnedFlow, cfg: Optional[SolveConfig] = None
) -> PinnedJacobian:
    """D_y of a pinned flow, started from the identity.

    Each column b solves the tangent system along the pinned trajectories
    with dY_0 = e_b, the measure held at the baseline and the second-order
    mean-field term read through the baseline averages.

    Returns:
        PinnedJacobian with initial_dP[tag, a, b] = d P_0^a / d y_b averaged over copies
    """
    m.require_second_derivatives("solve_pinned_jacobian")
    cfg = cfg or SolveConfig()
    ens, adj = pinned.ensemble, pinned.adjoint
    n = m.dim_state
    groups = pinned.tag_index if pinned.copies > 1 else None
    cache = second_order_steps(m, jm, ens)
    flows = []
    for b in range(n):
        eta = np.zeros((ens.particles, n))
        eta[:, b] = 1.0
        flows.append(_linear_flow(m, jm, ens, adj, eta, cfg, frozen=True, groups=groups, cache=cache))
    initial_dP = np.stack([pinned.per_tag(flow.dP[0]) for flow in flows], axis=2)
    initial_du = np.stack([pinned.per_tag(flow.du[0]) for flow in flows], axis=2)
    logger.info(f"Pinned Jacobian for {len(pinned.tags)} tags: iterations {[f.iterations for f in flows]}")
    return PinnedJacobian(flows=flows, initial_dP=initial_dP, initial_du=initial_du)


def pinned_jacobian_finite_difference(
    m: ModelSpec,
    jm: JumpMeasure,
    base: MFTCSolution,
    ys: np.ndarray,
    h: float,
    cfg: Optional[SolveConfig] = None,
    copies: Optional[int] = None,
) -> np.ndarray:
    """Central difference (P_0(y + h e_b) - P_0(y - h e_b)) / 2h on common noise, as (M, n, n)"""
    if not h > 0.0:
        raise DomainError(f"h must be positive, got {h}")
    cfg = cfg or SolveConfig()
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    columns = []
    for b in range(m.dim_state):
        shift = np.zeros(m.dim_state)
        shift[b] = h
        up = solve_pinned_flow(m, jm, base, ys + shift, cfg, copies)
        down = solve_pinned_flow(m, jm, base, ys - shift, cfg, copies)
        columns.append((up.initial_adjoint - down.initial_adjoint) / (2.0 * h))
    return np.stack(columns, axis=2)


def write_pinned_csv(flow: PinnedFlow, path: Union[str, Path]) -> Path:
    """Pinned trajectories in the ensemble layout with a tag column"""
    return write_ensemble_csv(flow.ensemble, path, tags=flow.tag_index)
