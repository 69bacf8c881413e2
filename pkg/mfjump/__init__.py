"""
mfjump: particle solver for mean-field-type control with jump-diffusions
"""

from .adjoint import AdjointEnsemble, solve_adjoint
from .cli import main
from .control import FeedbackPolicy, assemble_feedback, phi0, phij
from .costs import evaluate_cost
from .lqoracle import LQSpec, RiccatiSolution, solve_riccati, validate_oracle
from .measure import EmpiricalMeasure, wasserstein2
from .models import AssumptionConstants, SolveConfig, SolverReport, TimeGrid
from .problem import JumpMeasure, ModelSpec, affine_model, check_sufficiency_condition, example_drift_model
from .simulator import ParticleEnsemble, simulate_forward
from .solver import MFTCSolution, solve_mftc
from .value import certify_gap, fit_value_derivatives, hjb_residual

__version__ = "0.1.0"
__all__ = [
    "AdjointEnsemble",
    "AssumptionConstants",
    "EmpiricalMeasure",
    "FeedbackPolicy",
    "JumpMeasure",
    "LQSpec",
    "MFTCSolution",
    "ModelSpec",
    "ParticleEnsemble",
    "RiccatiSolution",
    "SolveConfig",
    "SolverReport",
    "TimeGrid",
    "affine_model",
    "assemble_feedback",
    "certify_gap",
    "check_sufficiency_condition",
    "evaluate_cost",
    "example_drift_model",
    "fit_value_derivatives",
    "hjb_residual",
    "main",
    "phi0",
    "phij",
    "simulate_forward",
    "solve_adjoint",
    "solve_mftc",
    "solve_riccati",
    "validate_oracle",
    "wasserstein2",
]
