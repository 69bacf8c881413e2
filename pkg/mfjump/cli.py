"""
CLI interface for mfjump
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
from pydantic import ValidationError

from .adjoint import write_adjoint_csv
from .config import Config, ExitCode
from .exceptions import (
    BlowUp,
    CallbackFailure,
    ConfigError,
    DomainError,
    MissingDerivatives,
    NoConvergence,
    NonAdmissible,
    OperationUnsupported,
    RiccatiBlowUp,
    SingularRegression,
    SufficiencyViolation,
)
from .control import FeedbackPolicy
from .costs import evaluate_cost, terminal_value
from .lqoracle import solve_riccati, validate_oracle
from .models import SolveConfig
from .problem import check_sufficiency_condition, estimate_constants, verify_derivative_consistency
from .runconfig import RunConfig, load_run_config
from .simulator import simulate_forward, write_ensemble_csv
from .solver import base_noise, control_change, solve_mftc
from .value import (
    MomentFunctional,
    ValueSample,
    certify_gap,
    estimate_time_derivative,
    fit_value_derivatives,
    hjb_residual,
    ito_check,
    q_r_characterization_check,
)

logger = logging.getLogger(__name__)


class NumpyEncoder(json.JSONEncoder):
    """JSON encoder that handles numpy types"""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        return super(NumpyEncoder, self).default(obj)


def write_json(payload: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, cls=NumpyEncoder)
    logger.info(f"Wrote {path}")
    return path


def solve_config(args: argparse.Namespace, config: RunConfig, particles: int) -> SolveConfig:
    """Solver settings with the command-line overrides applied"""
    update: Dict[str, Any] = {"particles": particles}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.tol is not None:
        update["tol_control"] = args.tol
    if args.threads is not None:
        update["threads"] = args.threads
    return config.solver.model_copy(update=update)


def output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    path = Path(args.out or config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


class Run:
    """A loaded configuration with its model, initial measure and settings"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = load_run_config(args.config)
        self.m, self.jm = self.config.build_model()
        self.init = self.config.initial_measure(Path(args.config).parent)
        self.cfg = solve_config(args, self.config, self.init.size)
        self.out = output_dir(args, self.config)

    def solve(self):
        return solve_mftc(self.m, self.jm, self.init, self.cfg)


def cmd_solve(args: argparse.Namespace) -> int:
    run = Run(args)
    try:
        solution = run.solve()
    except NoConvergence as e:
        if e.report is not None:
            write_json(e.report.model_dump(), run.out / "report.json")
        raise
    write_ensemble_csv(solution.ensemble, run.out / "ensemble.csv")
    write_adjoint_csv(solution.ensemble, solution.adjoint, run.out / "adjoint.csv")
    write_json(solution.report.model_dump(), run.out / "report.json")
    print(f"Converged in {solution.report.iterations} iterations, cost {solution.report.cost:.6g}")
    print(f"Results saved to: {run.out}")
    return ExitCode.OK


def cmd_verify(args: argparse.Namespace) -> int:
    run = Run(args)
    condition = check_sufficiency_condition(run.m.constants)
    violations = verify_derivative_consistency(run.m, jm=run.jm, seed=run.cfg.seed)
    estimated = estimate_constants(run.m, run.jm, seed=run.cfg.seed)
    write_json(
        {
            "sufficiency": condition.model_dump(),
            "holds": condition.holds,
            "violations": [v.model_dump() for v in violations],
            "estimated_constants": estimated.model_dump(),
        },
        run.out / "verify.json",
    )
    print(f"Sufficiency margins: (i) {condition.margin_i:.6g}, (ii) {condition.margin_ii:.6g}")
    for violation in violations:
        print(f"Derivative mismatch in {violation.callback}: error {violation.error:.3e}")
    return ExitCode.OK if condition.holds and not violations else ExitCode.FAILED


def cmd_certify(args: argparse.Namespace) -> int:
    run = Run(args)
    solution = run.solve()
    u = solution.ensemble.controls
    if args.random_scale is not None:
        rng = np.random.default_rng(run.cfg.seed)
        v = u + args.random_scale * rng.standard_normal(u.shape)
    else:
        v = u + args.shift
    certificate = certify_gap(run.m, run.jm, solution, v, run.cfg)
    write_json(certificate.model_dump(), run.out / "certificate.json")
    print(f"J(v) - J(u) = {certificate.lhs:.6g}, bound {certificate.rhs:.6g} (c = {certificate.coefficient:.6g})")
    return ExitCode.OK if certificate.passes else ExitCode.FAILED


def cmd_hjb(args: argparse.Namespace) -> int:
    run = Run(args)
    if not run.m.control_free_diffusion:
        raise OperationUnsupported("the HJB residual requires a diffusion that does not depend on the control")
    solution = run.solve()
    ens = solution.ensemble
    payload: Dict[str, Any] = {
        "terminal_value": terminal_value(run.m, ens.measure(ens.steps)),
        "terminal_cost": float(run.m.terminal(ens.states[-1], ens.cross_sections[-1]).mean()),
    }
    if args.zero_value:
        vs = ValueSample.zero(run.m, ens.grid.t0, ens.measure(0))
        dVdt = 0.0
    else:
        probes = run.config.probes(run.init)
        vs = fit_value_derivatives(run.m, run.jm, solution, probes, run.cfg, run.config.hjb.copies)
        dVdt = estimate_time_derivative(run.m, run.jm, run.init, run.cfg)
        payload["characterization"] = q_r_characterization_check(run.m, run.jm, solution, vs).model_dump()
        payload["fit_residual"] = vs.fit_residual
        payload["growth_constant"] = vs.growth_constant
        payload["anchor_convention"] = vs.anchor_convention
    report = hjb_residual(run.m, run.jm, vs, dVdt, run.cfg.minimizer)
    payload["hjb"] = report.model_dump()
    write_json(payload, run.out / "hjb.json")
    print(f"HJB residual {report.residual:.6g} (normalized {report.normalized_residual:.3e})")
    if report.normalized_residual > Config.HJB_RESIDUAL_THRESHOLD:
        return ExitCode.HJB_RESIDUAL
    return ExitCode.OK


def cmd_ito_check(args: argparse.Namespace) -> int:
    run = Run(args)
    if args.uncontrolled:
        noise = base_noise(run.m, run.jm, run.init.size, run.cfg)
        zero = FeedbackPolicy.from_field(np.zeros((run.cfg.steps, run.init.size, run.m.dim_control)))
        ens = simulate_forward(run.m, run.jm, run.init, zero, run.cfg.grid(), noise, run.cfg.blowup_cap)
    else:
        ens = run.solve().ensemble
    functional = MomentFunctional.first(args.coord) if args.functional == "first-moment" else MomentFunctional.second()
    report = ito_check(functional, run.m, run.jm, ens)
    write_json(report.model_dump(), run.out / "ito_check.json")
    print(f"Ito residual {report.residual:.4e} (rate residual {report.rate_residual:.4e})")
    return ExitCode.OK if report.residual <= args.max_residual else ExitCode.FAILED


def cmd_lq_compare(args: argparse.Namespace) -> int:
    run = Run(args)
    spec = run.config.lq
    if spec is None:
        raise ConfigError("lq-compare needs an 'lq' problem in the configuration")
    grid = run.cfg.grid()
    riccati = solve_riccati(spec, grid)
    solution = run.solve()
    ens = solution.ensemble
    value = riccati.value(0, run.init)
    cost = evaluate_cost(run.m, ens)
    optimal = np.stack(
        [riccati.feedback(k, ens.states[k], float(ens.states[k].mean())) for k in range(ens.steps)]
    )
    reference = control_change(optimal, grid.dt)
    payload: Dict[str, Any] = {
        "riccati_value": value,
        "cost": cost,
        "cost_error": abs(cost - value) / max(abs(value), 1e-12),
        "feedback_error": control_change(ens.controls - optimal, grid.dt) / reference if reference > 0.0 else 0.0,
        "gains_t0": riccati.gains(0),
        "p": riccati.p,
        "pi": riccati.pi,
    }
    passes = max(payload["cost_error"], payload["feedback_error"]) <= Config.LQ_COMPARE_THRESHOLD
    if args.validate:
        axes = tuple(g + np.linspace(-1.0, 1.0, 5) * 0.5 * (abs(g) + 0.1) for g in riccati.gains(0))
        validation = validate_oracle(spec, grid, run.init, axes, seed=run.cfg.seed, riccati=riccati)
        payload["validation"] = validation.model_dump()
        passes = passes and validation.passes
    write_json(payload, run.out / "lq_compare.json")
    print(f"Riccati value {value:.6g}, particle cost {cost:.6g}, feedback error {payload['feedback_error']:.3e}")
    return ExitCode.OK if passes else ExitCode.FAILED


EXIT_CODES = [
    ((ValidationError, ConfigError, DomainError, CallbackFailure, OSError), ExitCode.CONFIG_ERROR),
    ((NoConvergence, SingularRegression), ExitCode.FAILED),
    ((BlowUp, NonAdmissible, RiccatiBlowUp), ExitCode.BLOW_UP),
    ((SufficiencyViolation,), ExitCode.PRECONDITION),
    ((OperationUnsupported, MissingDerivatives), ExitCode.UNSUPPORTED),
]


def exit_code_for(error: BaseException) -> int:
    for kinds, code in EXIT_CODES:
        if isinstance(error, kinds):
            return int(code)
    return int(ExitCode.CONFIG_ERROR)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path to the JSON run configuration")
    common.add_argument("--out", help="Output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="Noise seed (overrides solver.seed)")
    common.add_argument("--threads", type=int, help="Worker threads (default: MFJUMP_THREADS or all cores)")
    common.add_argument("--tol", type=float, help="Picard tolerance (overrides solver.tol_control)")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    parser = argparse.ArgumentParser(
        description="mfjump - particle solver for mean-field-type control with jump-diffusions",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Solve and write ensemble.csv, adjoint.csv and report.json
  mfjump solve --config lq.json --out results/

  # Check the sufficiency condition and the derivative callbacks
  mfjump verify --config lq.json

  # Certify the optimality gap against a shifted control
  mfjump certify --config lq.json --shift 0.5

  # HJB residual of the fitted value function
  mfjump hjb --config lq.json

Exit codes:
  0 success, 1 configuration or I/O error, 2 non-convergence or failed check,
  3 blow-up, 4 sufficiency precondition refused, 5 HJB residual above threshold,
  6 operation unsupported

Environment Variables:
  MFJUMP_THREADS=8
  MFJUMP_LOG_LEVEL=INFO
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    subparsers.add_parser("solve", parents=[common], help="Solve the control problem")
    subparsers.add_parser("verify", parents=[common], help="Check constants and derivative callbacks")

    certify_parser = subparsers.add_parser("certify", parents=[common], help="Certify the optimality gap")
    alternative = certify_parser.add_mutually_exclusive_group()
    alternative.add_argument("--shift", type=float, default=0.0, help="Constant added to the optimal control")
    alternative.add_argument("--random-scale", type=float, help="Scale of a Gaussian perturbation of the control")

    hjb_parser = subparsers.add_parser("hjb", parents=[common], help="HJB residual of the value function")
    hjb_parser.add_argument("--zero-value", action="store_true", help="Evaluate the candidate V = 0 instead")

    ito_parser = subparsers.add_parser("ito-check", parents=[common], help="Check the mean-field Ito formula")
    ito_parser.add_argument("--functional", choices=["first-moment", "second-moment"], default="second-moment")
    ito_parser.add_argument("--coord", type=int, default=0, help="Coordinate of the first moment")
    ito_parser.add_argument("--uncontrolled", action="store_true", help="Simulate with zero control instead")
    ito_parser.add_argument("--max-residual", type=float, default=5e-2, help="Pass threshold")

    lq_parser = subparsers.add_parser("lq-compare", parents=[common], help="Compare with the Riccati oracle")
    lq_parser.add_argument("--validate", action="store_true", help="Also run the brute-force policy search")
    return parser


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "solve": cmd_solve,
    "verify": cmd_verify,
    "certify": cmd_certify,
    "hjb": cmd_hjb,
    "ito-check": cmd_ito_check,
    "lq-compare": cmd_lq_compare,
}


def main(argv=None) -> int:
    """Main CLI function."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return int(ExitCode.OK)

    logging.basicConfig(
        level="DEBUG" if args.verbose else Config.log_level(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return int(COMMANDS[args.command](args))
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
