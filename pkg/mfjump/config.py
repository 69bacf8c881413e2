"""
Configuration management for mfjump
"""

import logging
import os
from enum import Enum
from typing import Dict, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class PolicyMode(str, Enum):
    """How a feedback policy produces controls"""

    EXPLICIT_CALLBACK = "explicit_callback"
    ADJOINT_FEEDBACK = "adjoint_feedback"
    CONTROL_FIELD = "control_field"


class ExitCode(int, Enum):
    """Stable exit-code contract of the command line"""

    OK = 0
    CONFIG_ERROR = 1
    FAILED = 2
    BLOW_UP = 3
    PRECONDITION = 4
    HJB_RESIDUAL = 5
    UNSUPPORTED = 6


class Config:
    """Configuration settings for mfjump"""

    DEFAULT_OUTPUT_DIR = "results"

    # Particle system and grid
    DEFAULT_PARTICLES = 10_000
    DEFAULT_STEPS = 100
    DEFAULT_HORIZON = 1.0
    DEFAULT_SEED = 0
    BLOWUP_CAP = 1e8

    # Picard iteration
    DEFAULT_DAMPING = 0.5
    DEFAULT_TOL_CONTROL = 1e-4
    DEFAULT_MAX_PICARD = 200

    # Regression Monte Carlo
    DEFAULT_BASIS_DEGREE = 2
    MAX_BASIS_DEGREE = 4
    DEFAULT_RIDGE = 1e-8
    CONDITION_LIMIT = 1e15

    # Pointwise minimizers
    NEWTON_TOL = 1e-10
    MAX_NEWTON = 50
    MAX_HALVINGS = 30
    FIXED_POINT_ITERATIONS = 200
    OPTIMALITY_THRESHOLD = 1e-6

    # Linear (Jacobian and pinned) flows
    LINEAR_FLOW_TOL = 1e-8
    LINEAR_FLOW_MAX_ITER = 100
    LINEAR_FLOW_FALLBACK_DAMPING = 0.5
    DEFAULT_PINNED_COPIES = 2000

    # Measures and oracles
    W2_EXACT_LIMIT = 2000
    RICCATI_REFINEMENT = 10
    RICCATI_CAP = 1e8

    # Value function
    PINNED_FD_STEP = 1e-2
    QUADRATURE_NODES = 16
    TIME_DERIVATIVE_STEPS = 2
    GATEAUX_RTOL = 0.02

    # Monitors
    HJB_RESIDUAL_THRESHOLD = 0.02
    LQ_COMPARE_THRESHOLD = 0.01

    @staticmethod
    def get_default_config() -> Dict:
        """Returns default configuration dictionary"""
        return {
            "particles": Config.DEFAULT_PARTICLES,
            "steps": Config.DEFAULT_STEPS,
            "damping": Config.DEFAULT_DAMPING,
            "tol_control": Config.DEFAULT_TOL_CONTROL,
            "max_picard": Config.DEFAULT_MAX_PICARD,
            "basis_degree": Config.DEFAULT_BASIS_DEGREE,
            "ridge": Config.DEFAULT_RIDGE,
            "seed": Config.DEFAULT_SEED,
        }

    @staticmethod
    def resolve_threads(requested: Optional[int] = None) -> int:
        """Worker count: explicit request, then MFJUMP_THREADS, then all cores."""
        if requested is not None and requested > 0:
            return requested
        env_value = os.getenv("MFJUMP_THREADS")
        if env_value:
            try:
                threads = int(env_value)
                if threads > 0:
                    return threads
            except ValueError:
                logger.warning(f"Ignoring non-integer MFJUMP_THREADS={env_value!r}")
        return os.cpu_count() or 1

    @staticmethod
    def log_level() -> str:
        """Log level taken from MFJUMP_LOG_LEVEL (default WARNING)"""
        return os.getenv("MFJUMP_LOG_LEVEL", "WARNING").upper()
