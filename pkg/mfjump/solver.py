"""
Damped Picard iteration coupling forward particles, adjoint regression and feedback
"""

import logging
import time
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .adjoint import AdjointEnsemble, solve_adjoint
from .config import Config
from .control import FeedbackPolicy, assemble_feedback, cone_margins, optimality_residual
from .costs import evaluate_cost
from .evaluation.monitors import energy_constant, moment_constant, solution_s_norm
from .exceptions import BlowUp, DomainError, NoConvergence, SufficiencyViolation
from .measure import EmpiricalMeasure
from .models import ConditionReport, LipschitzReport, MinimizerSettings, SolveConfig, SolverReport
from .noise import NoiseBundle
from .parallel import ordered_map
from .problem import CrossSection, JumpMeasure, ModelSpec, check_sufficiency_condition
from .simulator import ParticleEnsemble, simulate_forward

logger = logging.getLogger(__name__)


class MFTCSolution(NamedTuple):
    ensemble: ParticleEnsemble
    adjoint: AdjointEnsemble
    report: SolverReport


def control_change(delta: np.ndarray, dt: float) -> float:
    """L2(dt x particles) norm of a control field difference"""
    return float(np.sqrt(dt * np.sum(np.mean(np.sum(delta**2, axis=2), axis=1))))


def feedback_field(
    m: ModelSpec,
    ens: ParticleEnsemble,
    adj: AdjointEnsemble,
    s: MinimizerSettings,
    init: Optional[np.ndarray] = None,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Pointwise minimizers against (P_k, Q_k) at every step, Newton started from init"""

    def step(k: int) -> np.ndarray:
        return assemble_feedback(
            m,
            ens.grid.time(k),
            ens.states[k],
            ens.cross_sections[k],
            adj.P[k],
            adj.Q[k],
            s,
            init=None if init is None else init[k],
        )

    return np.stack(ordered_map(step, range(ens.steps), threads))


def base_noise(m: ModelSpec, jm: JumpMeasure, particles: int, cfg: SolveConfig, stream: str = "base") -> NoiseBundle:
    return NoiseBundle.generate(
        cfg.seed, particles, cfg.grid(), m.dim_state, jm.weights, stream=stream, threads=cfg.threads
    )


def picard_solve(
    m: ModelSpec,
    jm: JumpMeasure,
    init: EmpiricalMeasure,
    cfg: SolveConfig,
    noise: NoiseBundle,
    warm_start: Optional[np.ndarray] = None,
    frozen: Optional[Sequence[CrossSection]] = None,
    averages: Optional[AdjointEnsemble] = None,
    groups: Optional[np.ndarray] = None,
    label: str = "Picard",
) -> Tuple[ParticleEnsemble, AdjointEnsemble, List[float], bool]:
    """Iterate simulate -> adjoint -> feedback -> damped update until the control settles.

    The loop stops once the damped change is at most tol_control and the pair
    simulated with the current field meets the first-order condition to
    Config.OPTIMALITY_THRESHOLD at every step and particle.

    With frozen cross-sections and baseline averages the same loop solves the
    system of particles that read a fixed measure instead of their own;
    groups labels particles started from a shared initial point.

    Returns:
        (ensemble simulated with the final field, its adjoint, change history, converged)

    Raises:
        BlowUp: With the Picard iteration attached
    """
    grid = cfg.grid()
    K, N, d = grid.steps, init.size, m.dim_control
    u = np.zeros((K, N, d)) if warm_start is None else np.array(warm_start, dtype=float)
    if u.shape != (K, N, d):
        raise DomainError(f"warm start has shape {u.shape}, expected {(K, N, d)}")
    rho = cfg.damping
    history: List[float] = []
    ens, adj = None, None

    for iteration in tqdm(range(1, cfg.max_picard + 1), desc=label, disable=not cfg.show_progress):
        try:
            ens = simulate_forward(m, jm, init, FeedbackPolicy.from_field(u), grid, noise, cfg.blowup_cap, frozen)
            adj = solve_adjoint(
                m, jm, ens, noise, cfg.regression, cfg.blowup_cap, frozen=averages, initial_groups=groups
            )
        except BlowUp as e:
            raise e.at_iteration(iteration)
        u_new = feedback_field(m, ens, adj, cfg.minimizer, init=u, threads=cfg.threads)
        change = rho * control_change(u_new - u, grid.dt)
        history.append(change)
        logger.info(f"{label} iteration {iteration}: change={change:.3e}")
        if change <= cfg.tol_control:
            residual = optimality_residual(m, ens, adj)
            if residual <= Config.OPTIMALITY_THRESHOLD:
                return ens, adj, history, True
            logger.info(f"{label} iteration {iteration}: optimality residual {residual:.3e} still above threshold")
        u = (1.0 - rho) * u + rho * u_new

    return ens, adj, history, False


def _require_sufficiency(m: ModelSpec, cfg: SolveConfig) -> ConditionReport:
    condition = check_sufficiency_condition(m.constants)
    if not condition.holds:
        message = (
            f"sufficiency condition fails (margins {condition.margin_i:.4g}, {condition.margin_ii:.4g}) "
            f"for constants {m.constants.model_dump()}"
        )
        if not cfg.allow_insufficient:
            raise SufficiencyViolation(message, report=condition)
        logger.warning(f"Continuing although the {message}")
    return condition


def solve_mftc(
    m: ModelSpec,
    jm: JumpMeasure,
    init: EmpiricalMeasure,
    cfg: Optional[SolveConfig] = None,
    noise: Optional[NoiseBundle] = None,
    warm_start: Optional[np.ndarray] = None,
) -> MFTCSolution:
    """Solve the mean-field-type control problem on a particle ensemble.

    The control field starts at zero (or warm_start) and is updated by
    u <- (1 - rho) u + rho u_new until rho * |u_new - u| <= tol_control in
    L2(dt x particles) and the optimality residual is at most
    Config.OPTIMALITY_THRESHOLD. The returned ensemble is simulated with the
    final field and the adjoint is computed along it.

    Args:
        m: The model
        jm: Jump intensity measure
        init: Initial particles
        cfg: Solve settings
        noise: Noise to use (generated from cfg.seed on the "base" stream by default)
        warm_start: Initial control field, steps x N x d

    Returns:
        MFTCSolution(ensemble, adjoint, report)

    Raises:
        SufficiencyViolation: If the sufficiency condition fails and allow_insufficient is off
        NoConvergence: After max_picard iterations, carrying the report
        BlowUp: With the iteration index
    """
    cfg = cfg or SolveConfig()
    start = time.time()
    condition = _require_sufficiency(m, cfg)
    if init.size != cfg.particles:
        raise DomainError(f"init has {init.size} particles but cfg.particles = {cfg.particles}")
    noise = noise or base_noise(m, jm, init.size, cfg)

    ens, adj, history, converged = picard_solve(m, jm, init, cfg, noise, warm_start=warm_start)
    residual = optimality_residual(m, ens, adj)
    report = SolverReport(
        converged=converged,
        iterations=len(history),
        history=history,
        cost=evaluate_cost(m, ens),
        cone=cone_margins(m, ens, adj),
        optimality_residual=residual,
        admissible=residual <= Config.OPTIMALITY_THRESHOLD,
        sufficiency=condition,
        moment_constant=moment_constant(ens.states),
        energy_constant=energy_constant(ens, adj),
        wallclock=time.time() - start,
        damping=cfg.damping,
        tol_control=cfg.tol_control,
    )
    if not converged:
        raise NoConvergence(
            f"Picard did not reach {cfg.tol_control:.1e} with optimality residual below "
            f"{Config.OPTIMALITY_THRESHOLD:.0e} in {cfg.max_picard} iterations "
            f"(last change {history[-1]:.3e}, optimality residual {residual:.3e})",
            report=report,
            residual=history[-1],
        )
    logger.info(
        "solve_complete",
        extra={
            "iterations": report.iterations,
            "cost": report.cost,
            "optimality_residual": residual,
            "wallclock": report.wallclock,
        },
    )
    return MFTCSolution(ens, adj, report)


def fixed_point_residual(m: ModelSpec, jm: JumpMeasure, solution: MFTCSolution, cfg: SolveConfig) -> float:
    """Control change of one more damped Picard step taken from the converged field"""
    ens, adj = solution.ensemble, solution.adjoint
    u = ens.controls
    u_new = feedback_field(m, ens, adj, cfg.minimizer, init=u, threads=cfg.threads)
    u = (1.0 - cfg.damping) * u + cfg.damping * u_new
    init = ens.measure(0)
    ens = simulate_forward(m, jm, init, FeedbackPolicy.from_field(u), ens.grid, ens.noise, cfg.blowup_cap)
    adj = solve_adjoint(m, jm, ens, ens.noise, cfg.regression, cfg.blowup_cap)
    u_next = feedback_field(m, ens, adj, cfg.minimizer, init=u, threads=cfg.threads)
    return cfg.damping * control_change(u_next - u, ens.grid.dt)


def lipschitz_probe(
    m: ModelSpec, jm: JumpMeasure, init1: EmpiricalMeasure, init2: EmpiricalMeasure, cfg: SolveConfig
) -> LipschitzReport:
    """Solve from two initial clouds on common noise and compare the solutions.

    Particle i of one cloud is coupled with particle i of the other; the
    initial gap is the L2 distance under that coupling.
    """
    if init1.size != init2.size:
        raise DomainError(f"both initial clouds need the same size, got {init1.size} and {init2.size}")
    noise = base_noise(m, jm, init1.size, cfg)
    first = solve_mftc(m, jm, init1, cfg, noise=noise)
    second = solve_mftc(m, jm, init2, cfg, noise=noise)
    gap = solution_s_norm(second.ensemble, second.adjoint, first.ensemble, first.adjoint)
    initial_gap = float(np.sqrt(np.mean(np.sum((init2.points - init1.points) ** 2, axis=1))))
    ratio = gap / initial_gap if initial_gap > 0.0 else None
    logger.info(f"Lipschitz probe: gap {gap:.4e}, initial gap {initial_gap:.4e}")
    return LipschitzReport(s_norm_gap=gap, initial_gap=initial_gap, ratio=ratio)
