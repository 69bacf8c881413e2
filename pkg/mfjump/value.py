"""
Sufficiency gap, value-function derivatives and the consistency checks built on them
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from .config import Config
from .control import FeedbackPolicy, phi0
from .costs import evaluate_cost, particle_costs, running_costs
from .evaluation.monitors import value_growth_constant
from .exceptions import BlowUp, DomainError, NonAdmissible, OperationUnsupported, SufficiencyViolation
from .measure import EmpiricalMeasure, moment2
from .models import (
    AssumptionConstants,
    DPPCheck,
    GapCertificate,
    GateauxCheck,
    HJBReport,
    ItoCheckReport,
    MinimizerSettings,
    QRCheckReport,
    SolveConfig,
)
from .noise import NoiseBundle
from .problem import CrossSection, JumpMeasure, ModelSpec, check_sufficiency_condition
from .regression import RidgeProjector
from .sensitivity import pinned_jacobian_finite_difference, solve_pinned_flow, solve_pinned_jacobian
from .simulator import ParticleEnsemble, simulate_forward
from .solver import MFTCSolution, base_noise, control_change, solve_mftc

logger = logging.getLogger(__name__)

ANCHOR_CONVENTION = "dV/dnu(t, mu)(mean of mu) = 0"


def _standard_error(samples: np.ndarray) -> float:
    return float(samples.std(ddof=1) / np.sqrt(len(samples))) if len(samples) > 1 else 0.0


# ---------------------------------------------------------------------------
# Sufficiency gap
# ---------------------------------------------------------------------------


def gap_coefficient(c: AssumptionConstants) -> float:
    """Coefficient of the quadratic optimality gap J(v) - J(u) >= coefficient * |v - u|^2.

    Raises:
        SufficiencyViolation: If the state-convexity denominator is not positive while L1 > 0
    """
    first = c.lambda_v - c.L**2 * c.L2 / (2.0 * c.lambda0)
    if c.L1 == 0.0:
        return float(first)
    denominator = c.lambda0 * (
        2.0 * c.lambda_x * c.lambda0 + 2.0 * c.lambda_m * c.lambda0 - 5.0 * (c.l + 1) * c.L**2 * c.L0
    )
    if denominator <= 0.0:
        raise SufficiencyViolation(f"gap coefficient undefined: convexity denominator {denominator:.4g} <= 0")
    return float(first - 2.0 * (c.l + 1) * c.L**4 * c.L1**2 / denominator)


def certify_gap(
    m: ModelSpec,
    jm: JumpMeasure,
    base: MFTCSolution,
    v_alt: Union[np.ndarray, FeedbackPolicy],
    cfg: Optional[SolveConfig] = None,
) -> GapCertificate:
    """Compare J(v) - J(u) with the guaranteed quadratic gap on common random numbers.

    Args:
        m: The model
        jm: Jump intensity measure
        base: Converged solution carrying u
        v_alt: Alternative control field (steps x N x d) or policy
        cfg: Settings (only blowup_cap and allow_insufficient are read)

    Raises:
        SufficiencyViolation: If the sufficiency condition fails and allow_insufficient is off
        NonAdmissible: If the alternative control blows up
    """
    cfg = cfg or SolveConfig()
    condition = check_sufficiency_condition(m.constants)
    if not condition.holds:
        if not cfg.allow_insufficient:
            raise SufficiencyViolation("gap certificate requires the sufficiency condition", report=condition)
        logger.warning("Certifying the gap although the sufficiency condition fails")
    coefficient = gap_coefficient(m.constants)

    ens = base[0]
    policy = v_alt if isinstance(v_alt, FeedbackPolicy) else FeedbackPolicy.from_field(v_alt)
    try:
        alt = simulate_forward(m, jm, ens.measure(0), policy, ens.grid, ens.noise, cfg.blowup_cap)
    except BlowUp as e:
        raise NonAdmissible(f"alternative control is not admissible: {e}") from e

    difference = particle_costs(m, alt) - particle_costs(m, ens)
    lhs = float(difference.mean())
    se = _standard_error(difference)
    rhs = coefficient * control_change(alt.controls - ens.controls, ens.grid.dt) ** 2
    certificate = GapCertificate(
        lhs=lhs, rhs=float(rhs), coefficient=coefficient, standard_error=se, passes=bool(lhs >= rhs - 3.0 * se)
    )
    logger.info(f"Gap certificate: J(v)-J(u)={lhs:.4e}, bound={rhs:.4e}, SE={se:.2e}")
    return certificate


# ---------------------------------------------------------------------------
# Value-function derivatives
# ---------------------------------------------------------------------------


def _zeros(trailing):
    def zeros(points):
        return np.zeros((len(np.atleast_2d(points)),) + trailing)

    return zeros


@dataclass
class ValueSample:
    """V(t, mu) with regression surrogates of D_y(dV/dnu) and D_y^2(dV/dnu).

    dV/dnu itself is recovered by integrating D_y(dV/dnu) along rays from the
    anchor (the mean of mu), where it is set to zero.

    Attributes:
        probes: M x n points the pinned flows were started from
        gradients: M x n pinned adjoints P_t^{y,mu}
        hessians: M x n x n pinned Jacobians D_y P_t^{y,mu}
        probe_Q: M x n x n pinned Q_t at the probes
        probe_R: M x A x n pinned R_t at the probes
        controls: Step-0 controls of the solver at the particles of mu
        fit_residual: RMS misfit of the gradient surrogate at the probes
        growth_constant: max |D_y(dV/dnu)(y)| / (1 + |y| + |mu|_2) over the probes
    """

    t: float
    mu: EmpiricalMeasure
    V: float
    probes: np.ndarray
    gradients: np.ndarray
    hessians: np.ndarray
    probe_Q: np.ndarray
    probe_R: np.ndarray
    controls: np.ndarray
    D_y_dVdnu: Callable[[np.ndarray], np.ndarray]
    D_y2_dVdnu: Callable[[np.ndarray], np.ndarray]
    fit_residual: float = 0.0
    growth_constant: float = 0.0
    anchor_convention: str = ANCHOR_CONVENTION

    @property
    def anchor(self) -> np.ndarray:
        return self.mu.mean()

    def dVdnu(self, y: np.ndarray) -> np.ndarray:
        """Gauss-Legendre line integral of D_y(dV/dnu) from the anchor to each row of y"""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        nodes, weights = np.polynomial.legendre.leggauss(Config.QUADRATURE_NODES)
        s, w = 0.5 * (nodes + 1.0), 0.5 * weights
        direction = y - self.anchor
        points = self.anchor + s[:, None, None] * direction[None]
        gradients = self.D_y_dVdnu(points.reshape(-1, y.shape[1])).reshape(points.shape)
        return np.einsum("q,qia,ia->i", w, gradients, direction)

    @classmethod
    def zero(cls, m: ModelSpec, t: float, mu: EmpiricalMeasure) -> "ValueSample":
        """The candidate V = 0, for rejecting a wrong value function"""
        n = m.dim_state
        return cls(
            t=t,
            mu=mu,
            V=0.0,
            probes=np.empty((0, n)),
            gradients=np.empty((0, n)),
            hessians=np.empty((0, n, n)),
            probe_Q=np.empty((0, n, n)),
            probe_R=np.empty((0, 0, n)),
            controls=np.zeros((mu.size, m.dim_control)),
            D_y_dVdnu=_zeros((n,)),
            D_y2_dVdnu=_zeros((n, n)),
        )


def fit_value_derivatives(
    m: ModelSpec,
    jm: JumpMeasure,
    base: MFTCSolution,
    ys: np.ndarray,
    cfg: Optional[SolveConfig] = None,
    copies: Optional[int] = None,
) -> ValueSample:
    """Value-function derivatives at the initial time from pinned flows on a probe grid.

    D_y(dV/dnu)(y) is the pinned adjoint P^{y,mu} and D_y^2(dV/dnu)(y) its
    Jacobian in y (tangent flows when second derivatives exist, central
    differences otherwise). Both are fitted by polynomial ridge regression
    over the probes.
    """
    cfg = cfg or SolveConfig()
    ens = base[0]
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    pinned = solve_pinned_flow(m, jm, base, ys, cfg, copies)
    if m.has_second_derivatives:
        hessians = solve_pinned_jacobian(m, jm, base, pinned, cfg).initial_dP
    else:
        logger.info("No second-derivative callbacks: differentiating pinned flows numerically")
        hessians = pinned_jacobian_finite_difference(m, jm, base, ys, Config.PINNED_FD_STEP, cfg, copies)
    hessians = 0.5 * (hessians + np.swapaxes(hessians, 1, 2))
    gradients = pinned.initial_adjoint

    projector = RidgeProjector(cfg.regression).fit(ys)
    fitted = projector.project(gradients)
    mu = ens.measure(0)
    growth = np.linalg.norm(gradients, axis=1) / (1.0 + np.linalg.norm(ys, axis=1) + moment2(mu))
    sample = ValueSample(
        t=ens.grid.t0,
        mu=mu,
        V=evaluate_cost(m, ens),
        probes=ys,
        gradients=gradients,
        hessians=hessians,
        probe_Q=pinned.initial_Q,
        probe_R=pinned.initial_R,
        controls=ens.controls[0],
        D_y_dVdnu=projector.surrogate(gradients),
        D_y2_dVdnu=projector.surrogate(hessians),
        fit_residual=float(np.sqrt(np.mean(np.sum((fitted - gradients) ** 2, axis=1)))),
        growth_constant=float(growth.max()),
    )
    logger.info(
        f"Value derivatives fitted on {len(ys)} probes: residual {sample.fit_residual:.3e}, "
        f"growth constant {sample.growth_constant:.3e}"
    )
    return sample


# ---------------------------------------------------------------------------
# Hamiltonian, HJB residual and characterizations
# ---------------------------------------------------------------------------


def hamiltonian_terms(
    m: ModelSpec,
    jm: JumpMeasure,
    vs: ValueSample,
    x: np.ndarray,
    cross: CrossSection,
    v: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Per-particle pieces of the Hamiltonian read through the derivatives in vs.

    Returns:
        Arrays of shape (N,) keyed diffusion, drift, compensator, running and nonlocal
    """
    t = vs.t
    grad = vs.D_y_dVdnu(x)
    hess = vs.D_y2_dVdnu(x)
    sigma = m.diffusion(t, x, cross, v)
    terms = {
        "diffusion": 0.5 * np.einsum("iaj,ibj,iab->i", sigma, sigma, hess),
        "drift": np.einsum("ia,ia->i", grad, m.drift(t, x, cross, m.split_controls(v)[0])),
        "compensator": np.zeros(len(x)),
        "running": m.running_cost(t, x, cross, v),
        "nonlocal": np.zeros(len(x)),
    }
    if jm.size:
        base_value = vs.dVdnu(x)
        for mark, weight in jm.atoms:
            gamma = m.jump(t, x, cross, mark)
            terms["compensator"] -= weight * np.einsum("ia,ia->i", grad, gamma)
            terms["nonlocal"] += weight * (vs.dVdnu(x + gamma) - base_value)
    return terms


def _require_control_free(m: ModelSpec, operation: str):
    if not m.control_free_diffusion:
        raise OperationUnsupported(f"{operation} requires a diffusion that does not depend on the control")


def hjb_residual(
    m: ModelSpec,
    jm: JumpMeasure,
    vs: ValueSample,
    dVdt: float,
    s: Optional[MinimizerSettings] = None,
) -> HJBReport:
    """dV/dt + integral of inf_v H(t, x, mu, v, D_y dV/dnu, D_y^2 dV/dnu, dV/dnu) mu(dx).

    The infimum is taken by the pointwise minimizer against D_y(dV/dnu)(x).
    minimizer_match is the L2 distance between that argmin field and the
    solver's step-0 control, relative to the latter.

    Raises:
        OperationUnsupported: If a diffusion column carries a control
    """
    _require_control_free(m, "hjb_residual")
    x = vs.mu.points
    cross = m.cross_section(x)
    v = phi0(m, vs.t, x, cross, vs.D_y_dVdnu(x), s).reshape(len(x), m.dim_control)
    terms = {name: float(values.mean()) for name, values in hamiltonian_terms(m, jm, vs, x, cross, v).items()}
    terms["dVdt"] = float(dVdt)
    residual = float(sum(terms.values()))
    scale = max(abs(value) for value in terms.values())
    normalized = abs(residual) / scale if scale > 0.0 else abs(residual)

    distance = float(np.sqrt(np.mean(np.sum((v - vs.controls) ** 2, axis=1))))
    reference = float(np.sqrt(np.mean(np.sum(vs.controls**2, axis=1))))
    match = distance / reference if reference > 0.0 else distance
    logger.info(f"HJB residual {residual:.4e} (normalized {normalized:.3e}), minimizer match {match:.3e}")
    return HJBReport(
        residual=residual, normalized_residual=normalized, minimizer_match=match, dVdt=float(dVdt), terms=terms
    )


def time_derivative_formula(m: ModelSpec, jm: JumpMeasure, vs: ValueSample) -> float:
    """-E[H(t, xi, mu, u_t, D_y dV/dnu(xi), D_y^2 dV/dnu(xi), dV/dnu)] at the solver's step-0 control"""
    x = vs.mu.points
    terms = hamiltonian_terms(m, jm, vs, x, m.cross_section(x), vs.controls)
    return -float(sum(values.mean() for values in terms.values()))


def _relative_error(actual: np.ndarray, predicted: np.ndarray) -> float:
    scale = max(np.linalg.norm(actual), np.linalg.norm(predicted))
    return float(np.linalg.norm(actual - predicted) / scale) if scale > 0.0 else 0.0


def q_r_characterization_check(m: ModelSpec, jm: JumpMeasure, base: MFTCSolution, vs: ValueSample) -> QRCheckReport:
    """Pinned Q^j against D_y^2(dV/dnu) sigma^j and R(e) against the jump of D_y(dV/dnu), at the probes"""
    _require_control_free(m, "q_r_characterization_check")
    ys = vs.probes
    cross = base[0].cross_sections[0]
    sigma = m.diffusion(vs.t, ys, cross, np.zeros((len(ys), m.dim_control)))
    q_err = _relative_error(vs.probe_Q, np.einsum("iab,ibj->iaj", vs.hessians, sigma))

    r_err = 0.0
    if jm.size:
        grad = vs.D_y_dVdnu(ys)
        predicted = np.stack(
            [vs.D_y_dVdnu(ys + m.jump(vs.t, ys, cross, mark)) - grad for mark in jm.marks], axis=1
        )
        r_err = _relative_error(vs.probe_R, predicted)
    logger.info(f"Q/R characterization: q_err={q_err:.3e}, r_err={r_err:.3e}")
    return QRCheckReport(q_err=q_err, r_err=r_err)


# ---------------------------------------------------------------------------
# Checks by re-solving
# ---------------------------------------------------------------------------


def _shifted(cfg: SolveConfig, t0: float, steps: int) -> SolveConfig:
    return cfg.model_copy(update={"t0": t0, "steps": steps})


def estimate_time_derivative(
    m: ModelSpec,
    jm: JumpMeasure,
    init: EmpiricalMeasure,
    cfg: SolveConfig,
    delta_steps: int = Config.TIME_DERIVATIVE_STEPS,
) -> float:
    """Central difference (V(t0 + delta, mu) - V(t0 - delta, mu)) / 2 delta with delta = delta_steps dt.

    Both solves share the terminal time and read time-aligned noise.
    """
    grid = cfg.grid()
    if not 1 <= delta_steps < grid.steps:
        raise DomainError(f"delta_steps must lie in [1, {grid.steps}), got {delta_steps}")
    longer, shorter = grid.extended(delta_steps), grid.restarted(delta_steps)
    noise = NoiseBundle.generate(
        cfg.seed, init.size, longer, m.dim_state, jm.weights, stream="time_derivative", threads=cfg.threads
    )
    before = solve_mftc(m, jm, init, _shifted(cfg, longer.t0, longer.steps), noise=noise)
    after = solve_mftc(m, jm, init, _shifted(cfg, shorter.t0, shorter.steps), noise=noise.tail(shorter.steps))
    delta = delta_steps * grid.dt
    derivative = (after.report.cost - before.report.cost) / (2.0 * delta)
    logger.info(f"dV/dt at t={grid.t0:.4g}: {derivative:.4e}")
    return float(derivative)


def gateaux_identity_check(
    m: ModelSpec,
    jm: JumpMeasure,
    init: EmpiricalMeasure,
    eta: np.ndarray,
    cfg: Optional[SolveConfig] = None,
    eps: float = 1e-2,
    base: Optional[MFTCSolution] = None,
    rtol: float = Config.GATEAUX_RTOL,
) -> GateauxCheck:
    """(V(xi + eps eta) - V(xi - eps eta)) / 2 eps against E[P_0 . eta] on common noise.

    Passes within 3 standard errors plus rtol of the larger magnitude.
    """
    cfg = cfg or SolveConfig()
    eta = np.asarray(eta, dtype=float).reshape(init.points.shape)
    noise = base[0].noise if base is not None else base_noise(m, jm, init.size, cfg)
    base = base or solve_mftc(m, jm, init, cfg, noise=noise)
    warm = base[0].controls
    up = solve_mftc(m, jm, EmpiricalMeasure(init.points + eps * eta), cfg, noise=noise, warm_start=warm)
    down = solve_mftc(m, jm, EmpiricalMeasure(init.points - eps * eta), cfg, noise=noise, warm_start=warm)

    difference = (particle_costs(m, up.ensemble) - particle_costs(m, down.ensemble)) / (2.0 * eps)
    fd = float(difference.mean())
    se = _standard_error(difference)
    pairing = float(np.mean(np.sum(base[1].P[0] * eta, axis=1)))
    passes = abs(fd - pairing) <= 3.0 * se + rtol * max(abs(fd), abs(pairing))
    logger.info(f"Gateaux identity: finite difference {fd:.5e}, E[P0.eta] {pairing:.5e}, SE {se:.2e}")
    return GateauxCheck(finite_difference=fd, adjoint_pairing=pairing, standard_error=se, passes=bool(passes))


def dpp_check(
    m: ModelSpec, jm: JumpMeasure, solution: MFTCSolution, steps_ahead: int, cfg: SolveConfig
) -> DPPCheck:
    """V(t, mu) against the running cost of the first steps plus V restarted from the law reached"""
    ens = solution[0]
    K = ens.steps
    if not 1 <= steps_ahead < K:
        raise DomainError(f"steps_ahead must lie in [1, {K}), got {steps_ahead}")
    value = evaluate_cost(m, ens)
    running = float(running_costs(m, ens, stop=steps_ahead).mean())
    restart = solve_mftc(
        m,
        jm,
        ens.measure(steps_ahead),
        _shifted(cfg, ens.grid.time(steps_ahead), K - steps_ahead),
        noise=ens.noise.tail(K - steps_ahead),
        warm_start=ens.controls[steps_ahead:],
    )
    continuation = restart.report.cost
    gap = value - running - continuation
    logger.info(f"DPP check over {steps_ahead} steps: gap {gap:.4e}")
    return DPPCheck(value=value, running_cost=running, continuation_value=continuation, gap=float(gap))


def value_growth(
    m: ModelSpec, jm: JumpMeasure, measures: Sequence[EmpiricalMeasure], cfg: SolveConfig
) -> float:
    """Fitted C in |V(t, mu)| <= C (1 + |mu|_2^2) over probe measures"""
    values = [solve_mftc(m, jm, mu, cfg).report.cost for mu in measures]
    return value_growth_constant(values, [moment2(mu) for mu in measures])


# ---------------------------------------------------------------------------
# Mean-field Ito formula
# ---------------------------------------------------------------------------


class MeasureFunctional(ABC):
    """F(t, mu) with dF/dnu and its first two y-derivatives, evaluated on particle clouds"""

    @abstractmethod
    def value(self, t: float, points: np.ndarray) -> float:
        """F(t, mu) for the uniform measure on points"""

    def time_derivative(self, t: float, points: np.ndarray) -> float:
        return 0.0

    @abstractmethod
    def derivative(self, t: float, points: np.ndarray, y: np.ndarray) -> np.ndarray:
        """dF/dnu(t, mu)(y), shape (M,)"""

    @abstractmethod
    def gradient(self, t: float, points: np.ndarray, y: np.ndarray) -> np.ndarray:
        """D_y dF/dnu, shape (M, n)"""

    @abstractmethod
    def hessian(self, t: float, points: np.ndarray, y: np.ndarray) -> np.ndarray:
        """D_y^2 dF/dnu, shape (M, n, n)"""


class MomentFunctional(MeasureFunctional):
    """The first moment of one coordinate, or the second moment |y|^2"""

    def __init__(self, order: int, coord: int = 0):
        if order not in (1, 2):
            raise DomainError(f"order must be 1 or 2, got {order}")
        self.order = order
        self.coord = coord

    @classmethod
    def first(cls, coord: int = 0) -> "MomentFunctional":
        return cls(1, coord)

    @classmethod
    def second(cls) -> "MomentFunctional":
        return cls(2)

    def value(self, t, points):
        return float(self.derivative(t, points, points).mean())

    def derivative(self, t, points, y):
        y = np.atleast_2d(y)
        return y[:, self.coord] if self.order == 1 else np.sum(y**2, axis=1)

    def gradient(self, t, points, y):
        y = np.atleast_2d(y)
        if self.order == 2:
            return 2.0 * y
        grad = np.zeros_like(y)
        grad[:, self.coord] = 1.0
        return grad

    def hessian(self, t, points, y):
        y = np.atleast_2d(y)
        n = y.shape[1]
        scale = 2.0 if self.order == 2 else 0.0
        return np.broadcast_to(scale * np.eye(n), (len(y), n, n))


def ito_check(F: MeasureFunctional, m: ModelSpec, jm: JumpMeasure, ens: ParticleEnsemble) -> ItoCheckReport:
    """Compare the evolution of F(t_k, mu_k) with the mean-field Ito formula along ens.

    The residual is the cumulative defect |F_k - F_0 - sum_{j<k} RHS_j dt|
    divided by t_k - t_0, maximized over knots; rate_residual compares the
    one-step difference quotients with RHS_k directly.
    """
    grid = ens.grid
    dt = grid.dt
    values = np.array([F.value(grid.time(k), ens.states[k]) for k in range(ens.steps + 1)])
    rhs = np.empty(ens.steps)
    for k in range(ens.steps):
        t, Y, cross, u = grid.time(k), ens.states[k], ens.cross_sections[k], ens.controls[k]
        grad = F.gradient(t, Y, Y)
        sigma = m.diffusion(t, Y, cross, u)
        total = np.einsum("ia,ia->i", grad, m.drift(t, Y, cross, m.split_controls(u)[0]))
        total = total + 0.5 * np.einsum("iaj,ibj,iab->i", sigma, sigma, F.hessian(t, Y, Y))
        if jm.size:
            level = F.derivative(t, Y, Y)
            for mark, weight in jm.atoms:
                gamma = m.jump(t, Y, cross, mark)
                total = total + weight * (F.derivative(t, Y, Y + gamma) - level - np.einsum("ia,ia->i", grad, gamma))
        rhs[k] = F.time_derivative(t, Y) + total.mean()

    rates = np.abs(np.diff(values) / dt - rhs)
    elapsed = dt * np.arange(1, ens.steps + 1)
    cumulative = np.abs(values[1:] - values[0] - np.cumsum(rhs) * dt) / elapsed
    logger.debug(f"Ito check: cumulative {cumulative.max():.3e}, rate {rates.max():.3e}")
    return ItoCheckReport(
        residual=float(cumulative.max()), rate_residual=float(rates.max()), per_knot=cumulative.tolist()
    )
