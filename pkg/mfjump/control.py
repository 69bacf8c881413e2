"""
Pointwise Hamiltonian minimizers, feedback policies and cone-property monitors
"""

import logging
from typing import Callable, List, Optional, Union

import numpy as np

from .config import Config, PolicyMode
from .exceptions import DomainError, NoConvergence
from .measure import EmpiricalMeasure
from .models import ConeMarginReport, MinimizerSettings, RegressionConfig
from .problem import ControlledColumn, CrossSection, ModelSpec, _call, _fd
from .regression import RidgeProjector, Surrogate

logger = logging.getLogger(__name__)

ResidualFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

FD_STEP = 1e-6


def _solve_batched(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(J, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.einsum("iab,ib->ia", np.linalg.pinv(J), rhs)


def _newton(
    residual: ResidualFn,
    jacobian: Optional[ResidualFn],
    v: np.ndarray,
    scale: np.ndarray,
    s: MinimizerSettings,
    contraction: float,
    name: str,
    trace: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    """Batched damped Newton on F(v) = 0, one independent root per row.

    A step is accepted for a particle only if it lowers that particle's
    residual norm; otherwise the step length is halved up to MAX_HALVINGS
    times. Particles where Newton stalls fall back to v <- v - contraction * F.

    Args:
        residual: F(v_rows, rows) for the given particle rows
        jacobian: dF/dv(v_rows, rows), or None for finite differences
        v: Starting point, one row per particle (updated in place)
        scale: Per-particle residual scale 1 + |p|
        s: Minimizer settings
        contraction: Step of the fixed-point fallback
        name: Minimizer name for messages
        trace: If given, receives the residual norms after every Newton iteration

    Raises:
        NoConvergence: If a particle misses the tolerance after the fallback
    """
    rows = np.arange(len(v))
    tol = s.newton_tol * scale
    F = residual(v, rows)
    norms = np.linalg.norm(F, axis=1)
    stuck = np.zeros(len(v), dtype=bool)
    if trace is not None:
        trace.append(norms.copy())

    for _ in range(s.max_newton):
        active = np.flatnonzero((norms > tol) & ~stuck)
        if active.size == 0:
            break
        if jacobian is not None:
            J = jacobian(v[active], active)
        else:
            J = _fd(lambda w: residual(w, active), v[active], FD_STEP)
        step = _solve_batched(J, -F[active])
        alpha = np.full(active.size, s.damping)
        pending = np.ones(active.size, dtype=bool)
        for _ in range(Config.MAX_HALVINGS + 1):
            where = np.flatnonzero(pending)
            idx = active[where]
            candidate = v[idx] + alpha[where, None] * step[where]
            F_candidate = residual(candidate, idx)
            candidate_norms = np.linalg.norm(F_candidate, axis=1)
            better = candidate_norms < norms[idx]
            accepted = idx[better]
            v[accepted] = candidate[better]
            F[accepted] = F_candidate[better]
            norms[accepted] = candidate_norms[better]
            pending[where[better]] = False
            if not pending.any():
                break
            alpha[pending] *= 0.5
        stuck[active[pending]] = True
        if trace is not None:
            trace.append(norms.copy())

    unresolved = np.flatnonzero(norms > tol)
    if unresolved.size and s.fixed_point_iterations > 0:
        logger.warning(
            f"{name}: Newton stalled for {unresolved.size} particles, "
            f"falling back to {s.fixed_point_iterations} fixed-point iterations"
        )
        for _ in range(s.fixed_point_iterations):
            v[unresolved] = v[unresolved] - contraction * F[unresolved]
            F[unresolved] = residual(v[unresolved], unresolved)
            norms[unresolved] = np.linalg.norm(F[unresolved], axis=1)
            unresolved = unresolved[norms[unresolved] > tol[unresolved]]
            if unresolved.size == 0:
                break

    if unresolved.size:
        worst = unresolved[np.argmax(norms[unresolved] / scale[unresolved])]
        raise NoConvergence(
            f"{name} did not converge for particle {worst}: residual {norms[worst]:.3e}",
            residual=float(norms[worst]),
            particle=int(worst),
        )
    return v


def _contraction(m: ModelSpec) -> float:
    c = m.constants
    L2 = max(c.L, 1.0) ** 2
    return (c.lambda_v if c.lambda_v > 0.0 else 1.0) / L2


def _batch(x: np.ndarray, p: np.ndarray):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), np.atleast_2d(np.asarray(p, dtype=float)), single


def _minimize_block(
    m: ModelSpec,
    coefficient,
    cost,
    t: float,
    x: np.ndarray,
    cross: CrossSection,
    p: np.ndarray,
    s: MinimizerSettings,
    init: Optional[np.ndarray],
    trace: Optional[List[np.ndarray]],
    name: str,
) -> np.ndarray:
    M = cross.moments
    d = coefficient.control_dim

    def residual(w, rows):
        return np.einsum("iad,ia->id", _call(f"{name}_dv", coefficient.dw, t, x[rows], M, w), p[rows]) + _call(
            f"{name}_cost_dv", cost.dw, t, x[rows], M, w
        )

    jacobian = None
    if coefficient.has_second_derivatives and cost.has_second_derivatives:

        def jacobian(w, rows):
            return np.einsum("iade,ia->ide", coefficient.dww(t, x[rows], M, w), p[rows]) + cost.dww(
                t, x[rows], M, w
            )

    v = np.zeros((len(x), d)) if init is None else np.array(init, dtype=float).reshape(len(x), d)
    scale = 1.0 + np.linalg.norm(p, axis=1)
    return _newton(residual, jacobian, v, scale, s, _contraction(m), name, trace)


def phi0(
    m: ModelSpec,
    t: float,
    x: np.ndarray,
    mu: Union[EmpiricalMeasure, CrossSection],
    p: np.ndarray,
    s: Optional[MinimizerSettings] = None,
    init: Optional[np.ndarray] = None,
    trace: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    """Minimizer of v -> B(t,x,mu,v)^T p + f^0(t,x,mu,v).

    Solves B_v^T p + f^0_v = 0 by damped Newton, for a single state or a
    batch of states with one adjoint row each.

    Args:
        m: The model
        t: Time
        x: State (n,) or batch (N, n)
        mu: Measure or cross-section the coefficients read
        p: Adjoint, same leading shape as x
        s: Minimizer settings
        init: Newton starting point (zero by default)
        trace: Receives residual norms per Newton iteration

    Returns:
        v^0 with shape (d_0,) or (N, d_0)

    Raises:
        NoConvergence: If the first-order condition cannot be met
    """
    xb, pb, single = _batch(x, p)
    s = s or MinimizerSettings()
    cost = m.running_cost_terms[0]
    v = _minimize_block(m, m.drift_coefficient, cost, t, xb, m.resolve(mu), pb, s, init, trace, "phi0")
    return v[0] if single else v


def phij(
    m: ModelSpec,
    j: int,
    t: float,
    x: np.ndarray,
    mu: Union[EmpiricalMeasure, CrossSection],
    qj: np.ndarray,
    s: Optional[MinimizerSettings] = None,
    init: Optional[np.ndarray] = None,
    trace: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    """Minimizer of v -> A^j(t,x,mu,v)^T q^j + f^j(t,x,mu,v) for a controlled column j (1-based)"""
    if j not in m.controlled_columns:
        raise DomainError(f"column {j} carries no control block")
    column = m.diffusion_cols[j - 1]
    if not isinstance(column, ControlledColumn):
        raise DomainError(f"column {j} is listed as controlled but is a {type(column).__name__}")
    xb, qb, single = _batch(x, qj)
    s = s or MinimizerSettings()
    cost = m.running_cost_terms[j]
    v = _minimize_block(m, column.coefficient, cost, t, xb, m.resolve(mu), qb, s, init, trace, f"phi{j}")
    return v[0] if single else v


def assemble_feedback(
    m: ModelSpec,
    t: float,
    states: np.ndarray,
    cross: CrossSection,
    P_k: np.ndarray,
    Q_k: Optional[np.ndarray],
    s: Optional[MinimizerSettings] = None,
    init: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Split control (phi0(P), phi^j(Q^j) for controlled j) for every particle.

    Blocks of control-free columns are empty. Q_k is N x n x n with column j
    in Q_k[:, :, j-1] and may be None when no column is controlled.
    """
    s = s or MinimizerSettings()
    slices = m.control_slices
    u = np.zeros((len(states), m.dim_control))
    start = None if init is None else init[:, slices[0]]
    u[:, slices[0]] = phi0(m, t, states, cross, P_k, s, init=start)
    for j in m.controlled_columns:
        start = None if init is None else init[:, slices[j]]
        u[:, slices[j]] = phij(m, j, t, states, cross, Q_k[:, :, j - 1], s, init=start)
    return u


class FeedbackPolicy:
    """Source of controls for forward simulation.

    A policy either calls a user function, replays a stored control field
    (steps x N x d), or minimizes the Hamiltonian against regression
    surrogates of an adjoint, evaluated at the current states.
    """

    def __init__(
        self,
        mode: PolicyMode,
        callback: Optional[Callable] = None,
        field: Optional[np.ndarray] = None,
        model: Optional[ModelSpec] = None,
        P_surrogates: Optional[List[Surrogate]] = None,
        Q_surrogates: Optional[List[Optional[Surrogate]]] = None,
        settings: Optional[MinimizerSettings] = None,
    ):
        self.mode = mode
        self.callback = callback
        self.field = field
        self.model = model
        self.P_surrogates = P_surrogates
        self.Q_surrogates = Q_surrogates
        self.settings = settings or MinimizerSettings()

    @classmethod
    def explicit(cls, callback: Callable) -> "FeedbackPolicy":
        """callback(k, t, states, cross) -> N x d"""
        return cls(PolicyMode.EXPLICIT_CALLBACK, callback=callback)

    @classmethod
    def from_field(cls, field: np.ndarray) -> "FeedbackPolicy":
        return cls(PolicyMode.CONTROL_FIELD, field=np.asarray(field, dtype=float))

    @classmethod
    def adjoint_feedback(
        cls,
        m: ModelSpec,
        ens,
        adj,
        regression: Optional[RegressionConfig] = None,
        settings: Optional[MinimizerSettings] = None,
    ) -> "FeedbackPolicy":
        """Feedback from surrogates of P_k and Q_k fitted on the states of ens"""
        regression = regression or RegressionConfig()
        P_surrogates = []
        Q_surrogates: List[Optional[Surrogate]] = []
        for k in range(ens.steps):
            projector = RidgeProjector(regression).fit(ens.states[k])
            P_surrogates.append(projector.surrogate(adj.P[k]))
            Q_surrogates.append(projector.surrogate(adj.Q[k]) if m.controlled_columns else None)
        return cls(
            PolicyMode.ADJOINT_FEEDBACK,
            model=m,
            P_surrogates=P_surrogates,
            Q_surrogates=Q_surrogates,
            settings=settings,
        )

    def controls(self, k: int, t: float, states: np.ndarray, cross: CrossSection) -> np.ndarray:
        if self.mode == PolicyMode.EXPLICIT_CALLBACK:
            return np.asarray(_call("policy", self.callback, k, t, states, cross), dtype=float)
        if self.mode == PolicyMode.CONTROL_FIELD:
            return self.field[k]
        Q_surrogate = self.Q_surrogates[k]
        return assemble_feedback(
            self.model,
            t,
            states,
            cross,
            self.P_surrogates[k](states),
            None if Q_surrogate is None else Q_surrogate(states),
            self.settings,
        )


def cone_margins(m: ModelSpec, ens, adj) -> ConeMarginReport:
    """Bound minus value of the cone inequalities at every particle and step.

    |P| <= (L^2/lambda0)(1 + |Y| + |mu|_1 + |u^0|)
    |Q^j| <= (L^2/lambda0)(1 + |Y| + |mu|_1 + |u^j|)
    |u^0| <= (L/(2 lambda_v))(1 + |P| + |Y| + |mu|_1)
    |u^j| <= (L/(2 lambda_v))(1 + |Q^j| + |Y| + |mu|_1)

    |mu|_1 is the first moment of the cross-section the coefficients read.
    Negative margins are reported, never raised.
    """
    c = m.constants
    K_P = c.L**2 / c.lambda0
    K_u = c.L / (2.0 * c.lambda_v) if c.lambda_v > 0.0 else np.inf
    slices = m.control_slices
    per_P: List[float] = []
    per_Q: List[Optional[float]] = []
    per_u: List[float] = []
    for k in range(ens.steps):
        base = 1.0 + np.linalg.norm(ens.states[k], axis=1) + ens.cross_sections[k].first_moment
        u = ens.controls[k]
        P_norm = np.linalg.norm(adj.P[k], axis=1)
        u0 = np.linalg.norm(u[:, slices[0]], axis=1)
        per_P.append(float(np.min(K_P * (base + u0) - P_norm)))
        u_margins = [np.min(K_u * (base + P_norm) - u0)]
        q_margins = []
        for j in m.controlled_columns:
            q_norm = np.linalg.norm(adj.Q[k, :, :, j - 1], axis=1)
            uj = np.linalg.norm(u[:, slices[j]], axis=1)
            q_margins.append(np.min(K_P * (base + uj) - q_norm))
            u_margins.append(np.min(K_u * (base + q_norm) - uj))
        per_Q.append(float(min(q_margins)) if q_margins else None)
        per_u.append(float(min(u_margins)))
    q_values = [q for q in per_Q if q is not None]
    return ConeMarginReport(
        per_step_P=per_P,
        per_step_Q=per_Q,
        per_step_u=per_u,
        min_margin_P=min(per_P),
        min_margin_Q=min(q_values) if q_values else None,
        min_margin_u=min(per_u),
    )


def optimality_residual(m: ModelSpec, ens, adj) -> float:
    """Max over steps and particles of |first-order condition| / (1 + |adjoint|)"""
    slices = m.control_slices
    worst = 0.0
    for k in range(ens.steps):
        t = ens.grid.time(k)
        Y, cross, u = ens.states[k], ens.cross_sections[k], ens.controls[k]
        M = cross.moments
        P = adj.P[k]
        v0 = u[:, slices[0]]
        F = np.einsum("iad,ia->id", m.drift_coefficient.dw(t, Y, M, v0), P)
        F = F + m.running_cost_terms[0].dw(t, Y, M, v0)
        worst = max(worst, float(np.max(np.linalg.norm(F, axis=1) / (1.0 + np.linalg.norm(P, axis=1)))))
        for j in m.controlled_columns:
            column = m.diffusion_cols[j - 1]
            q = adj.Q[k, :, :, j - 1]
            vj = u[:, slices[j]]
            F = np.einsum("iad,ia->id", column.coefficient.dw(t, Y, M, vj), q)
            F = F + m.running_cost_terms[j].dw(t, Y, M, vj)
            worst = max(worst, float(np.max(np.linalg.norm(F, axis=1) / (1.0 + np.linalg.norm(q, axis=1)))))
    return worst
