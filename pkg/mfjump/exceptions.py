"""
Error kinds raised by mfjump
"""

from typing import Any, Optional


class MFJumpError(Exception):
    """Base class for all solver errors"""


class ConfigError(MFJumpError):
    """Raised when a run configuration cannot be loaded"""


class DomainError(MFJumpError, ValueError):
    """Raised when an argument lies outside the supported parameter range"""


class CallbackFailure(MFJumpError):
    """Raised when a user-supplied coefficient callback raises"""

    def __init__(self, callback: str, cause: BaseException):
        self.callback = callback
        self.cause = cause
        super().__init__(f"callback '{callback}' failed: {type(cause).__name__}: {cause}")


class SizeLimit(MFJumpError):
    """Raised when an exact computation is requested beyond its size cap"""


class BlowUp(MFJumpError):
    """Raised when a particle state or adjoint exceeds the configured cap"""

    def __init__(self, step: int, particle: int, value: float, iteration: Optional[int] = None):
        self.step = step
        self.particle = particle
        self.value = value
        self.iteration = iteration
        super().__init__(self._message())

    def _message(self) -> str:
        where = f"step {self.step}, particle {self.particle}"
        if self.iteration is not None:
            where += f", Picard iteration {self.iteration}"
        return f"blow-up at {where}: |value| = {self.value:.3e}"

    def at_iteration(self, iteration: int) -> "BlowUp":
        self.iteration = iteration
        self.args = (self._message(),)
        return self


class SingularRegression(MFJumpError):
    """Raised when a regression normal matrix cannot be repaired by the ridge term"""


class NoConvergence(MFJumpError):
    """Raised when an iterative procedure stops before reaching its tolerance"""

    def __init__(
        self,
        message: str,
        report: Any = None,
        residual: Optional[float] = None,
        particle: Optional[int] = None,
    ):
        self.report = report
        self.residual = residual
        self.particle = particle
        super().__init__(message)


class MissingDerivatives(MFJumpError):
    """Raised when an operation needs second-derivative callbacks the model lacks"""


class NonAdmissible(MFJumpError):
    """Raised when an alternative control drives the state out of bounds"""


class OperationUnsupported(MFJumpError):
    """Raised when the model structure excludes the requested operation"""


class RiccatiBlowUp(MFJumpError):
    """Raised when the Riccati coefficients escape to infinity"""


class SufficiencyViolation(MFJumpError):
    """Raised when a solve is refused because the sufficiency condition fails"""

    def __init__(self, message: str, report: Any = None):
        self.report = report
        super().__init__(message)
