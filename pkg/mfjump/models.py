"""
Data models for mfjump
"""

from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, validator

from .config import Config


class AssumptionConstants(BaseModel):
    """Structural constants of the control problem, supplied by the user and auditable in reports"""

    L: float = Field(description="Lipschitz and growth bound of coefficients and cost gradients", ge=0.0)
    L0: float = Field(default=0.0, description="Bound on the second derivatives in the state", ge=0.0)
    L1: float = Field(default=0.0, description="Bound on the mixed state-control second derivatives", ge=0.0)
    L2: float = Field(default=0.0, description="Bound on the second derivatives in the control", ge=0.0)
    lambda0: float = Field(description="Lower bound of B_v B_v^T (non-degeneracy of the control loading)", gt=0.0)
    lambda_v: float = Field(description="Convexity modulus of the running cost in the control", ge=0.0)
    lambda_x: float = Field(default=0.0, description="Convexity modulus in the state")
    lambda_m: float = Field(default=0.0, description="Convexity modulus in the measure")
    l: int = Field(default=0, description="Number of diffusion columns carrying a control block", ge=0)

    @validator("lambda_m")
    def validate_convexity(cls, v, values):
        """Validate lambda_x + lambda_m > 0"""
        lambda_x = values.get("lambda_x")
        if lambda_x is not None and lambda_x + v <= 0.0:
            raise ValueError(f"lambda_x + lambda_m must be positive, got {lambda_x + v}")
        return v


class ConditionReport(BaseModel):
    """Outcome of the two sufficiency inequalities"""

    holds_i: bool
    holds_ii: bool
    margin_i: float
    margin_ii: float

    @property
    def holds(self) -> bool:
        return self.holds_i and self.holds_ii


class RegressionConfig(BaseModel):
    """Polynomial ridge regression used for every conditional expectation"""

    basis_degree: int = Field(
        default=Config.DEFAULT_BASIS_DEGREE, description="Total degree of the polynomial basis", ge=1
    )
    ridge: float = Field(default=Config.DEFAULT_RIDGE, description="Ridge penalty on standardized features", gt=0.0)

    class Config:
        extra = "forbid"

    @validator("basis_degree")
    def validate_degree(cls, v):
        """Guard the feature count"""
        if v > Config.MAX_BASIS_DEGREE:
            raise ValueError(f"basis_degree must be at most {Config.MAX_BASIS_DEGREE}, got {v}")
        return v


class MinimizerSettings(BaseModel):
    """Damped Newton settings for the pointwise Hamiltonian minimizers"""

    newton_tol: float = Field(default=Config.NEWTON_TOL, description="Residual tolerance relative to 1+|p|", gt=0.0)
    max_newton: int = Field(default=Config.MAX_NEWTON, description="Newton iteration cap", ge=1)
    damping: float = Field(default=1.0, description="Initial Newton step length", gt=0.0, le=1.0)
    fixed_point_iterations: int = Field(
        default=Config.FIXED_POINT_ITERATIONS, description="Fallback fixed-point iterations when Newton stalls", ge=0
    )

    class Config:
        extra = "forbid"


class TimeGrid(BaseModel):
    """Uniform time grid on [t0, T]"""

    t0: float = 0.0
    T: float = Config.DEFAULT_HORIZON
    steps: int = Field(default=Config.DEFAULT_STEPS, ge=1)

    @validator("T")
    def validate_horizon(cls, v, values):
        """Validate t0 < T"""
        t0 = values.get("t0")
        if t0 is not None and not v > t0:
            raise ValueError(f"T must exceed t0, got t0={t0}, T={v}")
        return v

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def time(self, k: int) -> float:
        return self.t0 + self.dt * k

    def restarted(self, start_step: int) -> "TimeGrid":
        """Grid covering the last steps of this one, starting at knot start_step"""
        if not 0 <= start_step < self.steps:
            raise ValueError(f"start_step must lie in [0, {self.steps}), got {start_step}")
        return TimeGrid(t0=self.time(start_step), T=self.T, steps=self.steps - start_step)

    def extended(self, extra_steps: int) -> "TimeGrid":
        """Grid with the same dt and terminal time, starting extra_steps earlier (later if negative)"""
        return TimeGrid(t0=self.t0 - extra_steps * self.dt, T=self.T, steps=self.steps + extra_steps)


class SolveConfig(BaseModel):
    """Settings of one Picard solve"""

    particles: int = Field(default=Config.DEFAULT_PARTICLES, description="Number of particles N", ge=1)
    steps: int = Field(default=Config.DEFAULT_STEPS, description="Number of time steps", ge=1)
    t0: float = Field(default=0.0, description="Initial time")
    T: float = Field(default=Config.DEFAULT_HORIZON, description="Terminal time")
    damping: float = Field(default=Config.DEFAULT_DAMPING, description="Picard damping rho", gt=0.0, le=1.0)
    tol_control: float = Field(default=Config.DEFAULT_TOL_CONTROL, description="L2 control-change tolerance", gt=0.0)
    max_picard: int = Field(default=Config.DEFAULT_MAX_PICARD, description="Picard iteration cap", ge=1)
    seed: int = Field(default=Config.DEFAULT_SEED, description="Noise seed", ge=0, le=2**64 - 1)
    regression: RegressionConfig = Field(default_factory=RegressionConfig)
    minimizer: MinimizerSettings = Field(default_factory=MinimizerSettings)
    blowup_cap: float = Field(default=Config.BLOWUP_CAP, description="Blow-up cap on |X| and |P|", gt=0.0)
    allow_insufficient: bool = Field(
        default=False, description="Warn and continue when the sufficiency condition fails"
    )
    linear_tol: float = Field(default=Config.LINEAR_FLOW_TOL, description="Relative tolerance of linear flows", gt=0.0)
    linear_max_iter: int = Field(default=Config.LINEAR_FLOW_MAX_ITER, description="Linear-flow iteration cap", ge=1)
    pinned_copies: int = Field(
        default=Config.DEFAULT_PINNED_COPIES, description="Tagged copies per pinned initial point", ge=1
    )
    threads: Optional[int] = Field(default=None, description="Worker threads (None: MFJUMP_THREADS or all cores)")
    show_progress: bool = Field(default=False, description="Show a progress bar over Picard iterations")

    class Config:
        extra = "forbid"

    @validator("T")
    def validate_horizon(cls, v, values):
        """Validate t0 < T"""
        t0 = values.get("t0")
        if t0 is not None and not v > t0:
            raise ValueError(f"T must exceed t0, got t0={t0}, T={v}")
        return v

    def grid(self) -> TimeGrid:
        return TimeGrid(t0=self.t0, T=self.T, steps=self.steps)


class ConeMarginReport(BaseModel):
    """Per-step minima of the cone-property margins (bound minus value)"""

    per_step_P: List[float] = Field(description="Minimum P margin over particles at each step")
    per_step_Q: List[Optional[float]] = Field(description="Minimum Q margin over controlled columns at each step")
    per_step_u: List[float] = Field(description="Minimum control margin over blocks at each step")
    min_margin_P: float
    min_margin_Q: Optional[float] = Field(default=None, description="None when no column carries a control")
    min_margin_u: float

    def all_nonnegative(self, slack: float = 0.0) -> bool:
        margins = [self.min_margin_P, self.min_margin_u]
        if self.min_margin_Q is not None:
            margins.append(self.min_margin_Q)
        return min(margins) >= -slack


class SolverReport(BaseModel):
    """Record of a Picard solve"""

    converged: bool
    iterations: int
    history: List[float] = Field(description="Per-iteration L2(dt x particles) control change")
    cost: Optional[float] = None
    cone: Optional[ConeMarginReport] = None
    optimality_residual: Optional[float] = Field(
        default=None, description="Max first-order-condition residual scaled by 1+|p|"
    )
    admissible: Optional[bool] = Field(default=None, description="Residual below the monitor threshold")
    sufficiency: Optional[ConditionReport] = None
    moment_constant: Optional[float] = None
    energy_constant: Optional[float] = None
    wallclock: float = 0.0
    damping: float = Config.DEFAULT_DAMPING
    tol_control: float = Config.DEFAULT_TOL_CONTROL
    scheme: str = Field(
        default="damped Picard; damping and tolerances are solver choices",
        description="Label of the fixed-point scheme",
    )


class LipschitzReport(BaseModel):
    """Stability of the solution map in the initial condition"""

    s_norm_gap: float = Field(description="S-norm of the difference of the two solutions")
    initial_gap: float = Field(description="Coupled per-particle L2 distance of the initial conditions")
    ratio: Optional[float] = Field(default=None, description="None when the initial gap vanishes")


class DerivativeViolation(BaseModel):
    """One analytic derivative disagreeing with finite differences"""

    callback: str
    probe: int
    error: float
    scale: float = 1.0


class EmpiricalConstants(BaseModel):
    """Constants estimated from callbacks on a probe box"""

    L: float
    lambda0: float
    lambda_v: float
    growth_l1: float = Field(description="max |b|/(1+|x|+|m|_1+|v|) over probes")
    growth_l2: float = Field(description="max |b|/(1+|x|+|m|_2+|v|) over probes")
    disagreements: List[str] = Field(default_factory=list)


class GapCertificate(BaseModel):
    """Quantitative optimality gap of a computed control against an alternative"""

    lhs: float = Field(description="J(v) - J(u)")
    rhs: float = Field(description="c * sum |v-u|^2 dt")
    coefficient: float
    standard_error: float
    passes: bool


class ItoCheckReport(BaseModel):
    """Agreement of a measure functional's evolution with the mean-field Ito formula"""

    residual: float = Field(description="Max cumulative defect divided by elapsed time")
    rate_residual: float = Field(description="Max per-knot defect of the discrete time derivative")
    per_knot: List[float] = Field(default_factory=list)


class HJBReport(BaseModel):
    """HJB residual of a fitted value function"""

    residual: float
    normalized_residual: float
    minimizer_match: float
    dVdt: float
    terms: Dict[str, float] = Field(default_factory=dict)


class QRCheckReport(BaseModel):
    """Relative L2 errors of the Q and R characterizations"""

    q_err: float
    r_err: float


class GateauxCheck(BaseModel):
    """Finite difference of V along a direction against E[P_0 . eta]"""

    finite_difference: float
    adjoint_pairing: float
    standard_error: float
    passes: bool


class DPPCheck(BaseModel):
    """Dynamic programming consistency of the value along the optimal flow"""

    value: float
    running_cost: float
    continuation_value: float
    gap: float
