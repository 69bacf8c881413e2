"""
Problem data for mean-field-type control with jumps.

Coefficients see the measure through a finite vector of generalized moments
M(m) = mean of psi over the particles, where psi is a MeanFieldFeatures map.
With that structure the Wasserstein gradients factor:

    D_y (dF/dnu)(x, m)(y)            = F_M(x, M) . Dpsi(y)
    D_y^2 (dF/dnu)(x, m)(y)          = sum_K F_{M_K}(x, M) D^2psi_K(y)
    D_{y'} D_y (d^2F/dnu^2)(y, y')   = Dpsi(y)^T F_MM Dpsi(y')

so every mean-field average over the ensemble is an O(N) reduction.
All callbacks are batched: arrays carry a leading particle axis and
Jacobians are indexed (particle, output, input).
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, validator

from .exceptions import CallbackFailure, DomainError, MFJumpError, MissingDerivatives
from .measure import EmpiricalMeasure
from .models import AssumptionConstants, ConditionReport, DerivativeViolation, EmpiricalConstants

logger = logging.getLogger(__name__)

TimeFunction = Callable[[float], np.ndarray]


def _time_function(value, shape: Tuple[int, ...]) -> TimeFunction:
    """Wrap a constant array or a callable of time into a callable returning the given shape"""
    if callable(value):
        return lambda t: np.asarray(value(t), dtype=float).reshape(shape)
    array = np.asarray(value, dtype=float).reshape(shape)
    return lambda t: array


def _call(name: str, fn: Callable, *args) -> np.ndarray:
    try:
        return np.asarray(fn(*args), dtype=float)
    except MFJumpError:
        raise
    except Exception as e:
        raise CallbackFailure(name, e) from e


# ---------------------------------------------------------------------------
# Mean-field features
# ---------------------------------------------------------------------------


class MeanFieldFeatures(ABC):
    """The map psi through which coefficients read the measure"""

    def __init__(self, state_dim: int, dim: int):
        self.state_dim = state_dim
        self.dim = dim

    @abstractmethod
    def value(self, y: np.ndarray) -> np.ndarray:
        """(N, n) -> (N, K)"""

    @abstractmethod
    def jacobian(self, y: np.ndarray) -> np.ndarray:
        """(N, n) -> (N, K, n)"""

    @abstractmethod
    def hessian(self, y: np.ndarray) -> np.ndarray:
        """(N, n) -> (N, K, n, n)"""

    def moments(self, states: np.ndarray) -> np.ndarray:
        return _call("features", self.value, states).mean(axis=0)


class LinearFeatures(MeanFieldFeatures):
    """psi(y) = y: coefficients depend on the measure through its mean"""

    def __init__(self, state_dim: int):
        super().__init__(state_dim, state_dim)

    def value(self, y):
        return np.asarray(y, dtype=float)

    def jacobian(self, y):
        return np.broadcast_to(np.eye(self.state_dim), (len(y), self.state_dim, self.state_dim)).copy()

    def hessian(self, y):
        n = self.state_dim
        return np.zeros((len(y), n, n, n))


def example_phi(y: np.ndarray) -> np.ndarray:
    """C^2 smoothing of |y|: |y| outside [-1, 1], -y^4/8 + 3y^2/4 + 3/8 inside"""
    y = np.asarray(y, dtype=float)
    inner = -(y**4) / 8.0 + 0.75 * y**2 + 0.375
    return np.where(np.abs(y) >= 1.0, np.abs(y), inner)


def example_phi_prime(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.where(np.abs(y) >= 1.0, np.sign(y), -(y**3) / 2.0 + 1.5 * y)


def example_phi_second(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.where(np.abs(y) >= 1.0, 0.0, -1.5 * y**2 + 1.5)


class ExampleFeatures(MeanFieldFeatures):
    """psi(y) = (y, phi(y)) in one dimension"""

    def __init__(self):
        super().__init__(1, 2)

    def value(self, y):
        y = np.asarray(y, dtype=float)[:, 0]
        return np.stack([y, example_phi(y)], axis=1)

    def jacobian(self, y):
        y = np.asarray(y, dtype=float)[:, 0]
        return np.stack([np.ones_like(y), example_phi_prime(y)], axis=1)[:, :, None]

    def hessian(self, y):
        y = np.asarray(y, dtype=float)[:, 0]
        return np.stack([np.zeros_like(y), example_phi_second(y)], axis=1)[:, :, None, None]


# ---------------------------------------------------------------------------
# Coefficient interfaces
# ---------------------------------------------------------------------------


class ControlledMap(ABC):
    """Vector coefficient F(t, x, M, w) with values in R^n.

    Used for the drift B(t, x, m, v^0) and for controlled diffusion columns
    A^j(t, x, m, v^j). Subclasses providing the six second-derivative methods
    set has_second_derivatives.
    """

    has_second_derivatives = False

    def __init__(self, state_dim: int, control_dim: int, feature_dim: int):
        self.state_dim = state_dim
        self.control_dim = control_dim
        self.feature_dim = feature_dim

    @abstractmethod
    def value(self, t: float, x: np.ndarray, M: np.ndarray, w: np.ndarray) -> np.ndarray:
        """(N, n)"""

    @abstractmethod
    def dx(self, t, x, M, w) -> np.ndarray:
        """(N, n, n)"""

    @abstractmethod
    def dw(self, t, x, M, w) -> np.ndarray:
        """(N, n, dw)"""

    @abstractmethod
    def dm(self, t, x, M, w) -> np.ndarray:
        """(N, n, K)"""

    def _missing(self, name: str):
        raise MissingDerivatives(f"{type(self).__name__} does not provide {name}")

    def dxx(self, t, x, M, w) -> np.ndarray:
        """(N, n, n, n)"""
        self._missing("dxx")

    def dxw(self, t, x, M, w) -> np.ndarray:
        """(N, n, n, dw)"""
        self._missing("dxw")

    def dww(self, t, x, M, w) -> np.ndarray:
        """(N, n, dw, dw)"""
        self._missing("dww")

    def dxm(self, t, x, M, w) -> np.ndarray:
        """(N, n, n, K)"""
        self._missing("dxm")

    def dwm(self, t, x, M, w) -> np.ndarray:
        """(N, n, dw, K)"""
        self._missing("dwm")

    def dmm(self, t, x, M, w) -> np.ndarray:
        """(N, n, K, K)"""
        self._missing("dmm")


class ScalarCost(ABC):
    """Running cost term f^j(t, x, M, w)"""

    has_second_derivatives = False

    def __init__(self, state_dim: int, control_dim: int, feature_dim: int):
        self.state_dim = state_dim
        self.control_dim = control_dim
        self.feature_dim = feature_dim

    @abstractmethod
    def value(self, t, x, M, w) -> np.ndarray:
        """(N,)"""

    @abstractmethod
    def dx(self, t, x, M, w) -> np.ndarray:
        """(N, n)"""

    @abstractmethod
    def dw(self, t, x, M, w) -> np.ndarray:
        """(N, dw)"""

    @abstractmethod
    def dm(self, t, x, M, w) -> np.ndarray:
        """(N, K)"""

    def _missing(self, name: str):
        raise MissingDerivatives(f"{type(self).__name__} does not provide {name}")

    def dxx(self, t, x, M, w) -> np.ndarray:
        self._missing("dxx")

    def dxw(self, t, x, M, w) -> np.ndarray:
        self._missing("dxw")

    def dww(self, t, x, M, w) -> np.ndarray:
        self._missing("dww")

    def dxm(self, t, x, M, w) -> np.ndarray:
        self._missing("dxm")

    def dwm(self, t, x, M, w) -> np.ndarray:
        self._missing("dwm")

    def dmm(self, t, x, M, w) -> np.ndarray:
        self._missing("dmm")


class TerminalCost(ABC):
    """Terminal cost g(x, M)"""

    has_second_derivatives = False

    def __init__(self, state_dim: int, feature_dim: int):
        self.state_dim = state_dim
        self.feature_dim = feature_dim

    @abstractmethod
    def value(self, x, M) -> np.ndarray:
        """(N,)"""

    @abstractmethod
    def dx(self, x, M) -> np.ndarray:
        """(N, n)"""

    @abstractmethod
    def dm(self, x, M) -> np.ndarray:
        """(N, K)"""

    def _missing(self, name: str):
        raise MissingDerivatives(f"{type(self).__name__} does not provide {name}")

    def dxx(self, x, M) -> np.ndarray:
        self._missing("dxx")

    def dxm(self, x, M) -> np.ndarray:
        self._missing("dxm")

    def dmm(self, x, M) -> np.ndarray:
        self._missing("dmm")


# ---------------------------------------------------------------------------
# Built-in coefficient families
# ---------------------------------------------------------------------------


class AffineMap(ControlledMap):
    """F = offset(t) + A(t) x + Abar(t) M + C(t) w"""

    has_second_derivatives = True

    def __init__(self, A, Abar, C, offset=None):
        A0 = np.asarray(A(0.0) if callable(A) else A, dtype=float)
        n = A0.shape[0]
        Abar0 = np.asarray(Abar(0.0) if callable(Abar) else Abar, dtype=float).reshape(n, -1)
        C0 = np.asarray(C(0.0) if callable(C) else C, dtype=float).reshape(n, -1)
        super().__init__(n, C0.shape[1], Abar0.shape[1])
        self._A = _time_function(A, (n, n))
        self._Abar = _time_function(Abar, (n, self.feature_dim))
        self._C = _time_function(C, (n, self.control_dim))
        self._offset = _time_function(np.zeros(n) if offset is None else offset, (n,))

    def value(self, t, x, M, w):
        return self._offset(t) + x @ self._A(t).T + self._Abar(t) @ M + w @ self._C(t).T

    def dx(self, t, x, M, w):
        return np.broadcast_to(self._A(t), (len(x),) + self._A(t).shape).copy()

    def dw(self, t, x, M, w):
        return np.broadcast_to(self._C(t), (len(x),) + self._C(t).shape).copy()

    def dm(self, t, x, M, w):
        return np.broadcast_to(self._Abar(t), (len(x),) + self._Abar(t).shape).copy()

    def dxx(self, t, x, M, w):
        n = self.state_dim
        return np.zeros((len(x), n, n, n))

    def dxw(self, t, x, M, w):
        n = self.state_dim
        return np.zeros((len(x), n, n, self.control_dim))

    def dww(self, t, x, M, w):
        return np.zeros((len(x), self.state_dim, self.control_dim, self.control_dim))

    def dxm(self, t, x, M, w):
        n = self.state_dim
        return np.zeros((len(x), n, n, self.feature_dim))

    def dwm(self, t, x, M, w):
        return np.zeros((len(x), self.state_dim, self.control_dim, self.feature_dim))

    def dmm(self, t, x, M, w):
        return np.zeros((len(x), self.state_dim, self.feature_dim, self.feature_dim))


class ExampleDrift(ControlledMap):
    """B = x + v + M_0 + eps x exp(-x^2 - v^2 - M_1^2), with M = (mean, integral of phi)"""

    has_second_derivatives = True

    def __init__(self, epsilon: float):
        super().__init__(1, 1, 2)
        self.epsilon = float(epsilon)

    def _parts(self, x, M, w):
        x1 = np.asarray(x, dtype=float)[:, 0]
        w1 = np.asarray(w, dtype=float)[:, 0]
        m1 = float(M[1])
        bump = np.exp(-(x1**2) - w1**2 - m1**2)
        return x1, w1, m1, bump

    def value(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        return (x1 + w1 + M[0] + self.epsilon * x1 * bump)[:, None]

    def dx(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        return (1.0 + self.epsilon * bump * (1.0 - 2.0 * x1**2))[:, None, None]

    def dw(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        return (1.0 - 2.0 * self.epsilon * x1 * w1 * bump)[:, None, None]

    def dm(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        out = np.zeros((len(x1), 1, 2))
        out[:, 0, 0] = 1.0
        out[:, 0, 1] = -2.0 * self.epsilon * x1 * m1 * bump
        return out

    def dxx(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        return (self.epsilon * bump * (4.0 * x1**3 - 6.0 * x1))[:, None, None, None]

    def dxw(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        return (-2.0 * self.epsilon * w1 * (1.0 - 2.0 * x1**2) * bump)[:, None, None, None]

    def dww(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        return (-2.0 * self.epsilon * x1 * bump * (1.0 - 2.0 * w1**2))[:, None, None, None]

    def dxm(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        out = np.zeros((len(x1), 1, 1, 2))
        out[:, 0, 0, 1] = -2.0 * self.epsilon * m1 * (1.0 - 2.0 * x1**2) * bump
        return out

    def dwm(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        out = np.zeros((len(x1), 1, 1, 2))
        out[:, 0, 0, 1] = 4.0 * self.epsilon * x1 * w1 * m1 * bump
        return out

    def dmm(self, t, x, M, w):
        x1, w1, m1, bump = self._parts(x, M, w)
        out = np.zeros((len(x1), 1, 2, 2))
        out[:, 0, 1, 1] = -2.0 * self.epsilon * x1 * bump * (1.0 - 2.0 * m1**2)
        return out


def builtin_example_drift(epsilon: float) -> Tuple[ExampleDrift, ExampleFeatures]:
    """The one-dimensional nonlinear drift and the features it reads the measure through.

    Raises:
        DomainError: If |epsilon| > 1
    """
    if not np.isfinite(epsilon) or abs(epsilon) > 1.0:
        raise DomainError(f"|epsilon| must be at most 1, got {epsilon}")
    return ExampleDrift(epsilon), ExampleFeatures()


class QuadraticCost(ScalarCost):
    """f = 1/2 x^T Q x + 1/2 M^T Qbar M + 1/2 w^T R w + x^T S M + offset"""

    has_second_derivatives = True

    def __init__(self, Q, Qbar, R, S=None, offset: float = 0.0):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        Qbar = np.atleast_2d(np.asarray(Qbar, dtype=float))
        R = np.asarray(R, dtype=float)
        R = R.reshape(0, 0) if R.size == 0 else np.atleast_2d(R)
        super().__init__(Q.shape[0], R.shape[0], Qbar.shape[0])
        self.Q = 0.5 * (Q + Q.T)
        self.Qbar = 0.5 * (Qbar + Qbar.T)
        self.R = 0.5 * (R + R.T)
        self.S = np.zeros((self.state_dim, self.feature_dim)) if S is None else np.asarray(S, dtype=float)
        self.offset = float(offset)

    def value(self, t, x, M, w):
        return (
            0.5 * np.einsum("ia,ab,ib->i", x, self.Q, x)
            + 0.5 * float(M @ self.Qbar @ M)
            + 0.5 * np.einsum("ia,ab,ib->i", w, self.R, w)
            + x @ (self.S @ M)
            + self.offset
        )

    def dx(self, t, x, M, w):
        return x @ self.Q + self.S @ M

    def dw(self, t, x, M, w):
        return w @ self.R

    def dm(self, t, x, M, w):
        return self.Qbar @ M + x @ self.S

    def dxx(self, t, x, M, w):
        return np.broadcast_to(self.Q, (len(x),) + self.Q.shape).copy()

    def dxw(self, t, x, M, w):
        return np.zeros((len(x), self.state_dim, self.control_dim))

    def dww(self, t, x, M, w):
        return np.broadcast_to(self.R, (len(x),) + self.R.shape).copy()

    def dxm(self, t, x, M, w):
        return np.broadcast_to(self.S, (len(x),) + self.S.shape).copy()

    def dwm(self, t, x, M, w):
        return np.zeros((len(x), self.control_dim, self.feature_dim))

    def dmm(self, t, x, M, w):
        return np.broadcast_to(self.Qbar, (len(x),) + self.Qbar.shape).copy()


class QuadraticTerminalCost(TerminalCost):
    """g = 1/2 x^T H x + 1/2 M^T Hbar M + x^T S M"""

    has_second_derivatives = True

    def __init__(self, H, Hbar, S=None):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        Hbar = np.atleast_2d(np.asarray(Hbar, dtype=float))
        super().__init__(H.shape[0], Hbar.shape[0])
        self.H = 0.5 * (H + H.T)
        self.Hbar = 0.5 * (Hbar + Hbar.T)
        self.S = np.zeros((self.state_dim, self.feature_dim)) if S is None else np.asarray(S, dtype=float)

    def value(self, x, M):
        return 0.5 * np.einsum("ia,ab,ib->i", x, self.H, x) + 0.5 * float(M @ self.Hbar @ M) + x @ (self.S @ M)

    def dx(self, x, M):
        return x @ self.H + self.S @ M

    def dm(self, x, M):
        return self.Hbar @ M + x @ self.S

    def dxx(self, x, M):
        return np.broadcast_to(self.H, (len(x),) + self.H.shape).copy()

    def dxm(self, x, M):
        return np.broadcast_to(self.S, (len(x),) + self.S.shape).copy()

    def dmm(self, x, M):
        return np.broadcast_to(self.Hbar, (len(x),) + self.Hbar.shape).copy()


# ---------------------------------------------------------------------------
# Diffusion columns and jumps
# ---------------------------------------------------------------------------


class LinearColumn:
    """Control-free column sigma^j = sigma0(t) + sigma1(t) x + sigma2(t) mean"""

    control_dim = 0

    def __init__(self, sigma0, sigma1, sigma2, state_dim: int):
        n = state_dim
        self.state_dim = n
        self.sigma0 = _time_function(sigma0, (n,))
        self.sigma1 = _time_function(sigma1, (n, n))
        self.sigma2 = _time_function(sigma2, (n, n))

    def value(self, t: float, x: np.ndarray, mean: np.ndarray) -> np.ndarray:
        return self.sigma0(t) + x @ self.sigma1(t).T + self.sigma2(t) @ mean


class ControlledColumn:
    """Column sigma^j = A^j(t, x, m, v^j) carrying its own control block"""

    def __init__(self, coefficient: ControlledMap):
        self.coefficient = coefficient
        self.control_dim = coefficient.control_dim
        self.state_dim = coefficient.state_dim


DiffusionColumn = Union[LinearColumn, ControlledColumn]


class JumpMeasure:
    """Finite atomic intensity measure lambda = sum_k lambda_k delta_{e_k}"""

    def __init__(self, atoms: Sequence[Tuple[Sequence[float], float]] = ()):
        marks = []
        weights = []
        for mark, weight in atoms:
            mark_array = np.atleast_1d(np.asarray(mark, dtype=float))
            if not np.all(np.isfinite(mark_array)) or not np.any(mark_array != 0.0):
                raise DomainError(f"jump marks must be finite and nonzero, got {mark_array.tolist()}")
            if not np.isfinite(weight) or weight <= 0.0:
                raise DomainError(f"jump weights must be positive and finite, got {weight}")
            marks.append(mark_array)
            weights.append(float(weight))
        if marks and len({m.size for m in marks}) != 1:
            raise DomainError("all jump marks must share one dimension")
        self.marks: List[np.ndarray] = marks
        self.weights = np.asarray(weights, dtype=float)

    @property
    def size(self) -> int:
        return len(self.marks)

    def __len__(self) -> int:
        return self.size

    @property
    def total_intensity(self) -> float:
        return float(self.weights.sum())

    @property
    def atoms(self) -> List[Tuple[np.ndarray, float]]:
        return list(zip(self.marks, self.weights.tolist()))


class LinearJump:
    """Control-free jump coefficient gamma = gamma0(t,e) + gamma1(t,e) x + gamma2(t,e) mean"""

    def __init__(self, gamma0: Callable, gamma1: Callable, gamma2: Callable, state_dim: int):
        self.state_dim = state_dim
        self._gamma0 = gamma0
        self._gamma1 = gamma1
        self._gamma2 = gamma2

    @classmethod
    def per_atom(
        cls, jm: JumpMeasure, coefficients: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]], state_dim: int
    ) -> "LinearJump":
        """Time-constant coefficients given atom by atom (marks must be distinct)"""
        if len(coefficients) != jm.size:
            raise DomainError(f"expected {jm.size} coefficient triples, got {len(coefficients)}")
        n = state_dim
        table: Dict[Tuple[float, ...], Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for mark, (g0, g1, g2) in zip(jm.marks, coefficients):
            key = tuple(mark.tolist())
            if key in table:
                raise DomainError(f"duplicate jump mark {key}")
            table[key] = (
                np.asarray(g0, dtype=float).reshape(n),
                np.asarray(g1, dtype=float).reshape(n, n),
                np.asarray(g2, dtype=float).reshape(n, n),
            )
        return cls(
            lambda t, e: table[tuple(np.atleast_1d(e).tolist())][0],
            lambda t, e: table[tuple(np.atleast_1d(e).tolist())][1],
            lambda t, e: table[tuple(np.atleast_1d(e).tolist())][2],
            state_dim,
        )

    def coefficients(self, t: float, mark: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.state_dim
        g0 = _call("gamma0", self._gamma0, t, mark).reshape(n)
        g1 = _call("gamma1", self._gamma1, t, mark).reshape(n, n)
        g2 = _call("gamma2", self._gamma2, t, mark).reshape(n, n)
        return g0, g1, g2

    def value(self, t: float, x: np.ndarray, mean: np.ndarray, mark: np.ndarray) -> np.ndarray:
        g0, g1, g2 = self.coefficients(t, mark)
        return g0 + x @ g1.T + g2 @ mean


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossSection:
    """Summary of an empirical cross-section that coefficients read"""

    mean: np.ndarray
    moments: np.ndarray
    first_moment: float
    second_moment: float


class ModelSpec(BaseModel):
    """Coefficient bundle (b, sigma, gamma, f, g) with the control split v = (v^0, ..., v^n)"""

    dim_state: int
    dim_control: int
    control_split: List[int]
    features: MeanFieldFeatures
    drift_coefficient: ControlledMap
    diffusion_cols: List[Union[LinearColumn, ControlledColumn]]
    jump_coeff: Optional[LinearJump] = None
    running_cost_terms: List[Optional[ScalarCost]]
    terminal_cost: TerminalCost
    constants: AssumptionConstants

    class Config:
        arbitrary_types_allowed = True
        frozen = True

    @validator("control_split")
    def validate_split(cls, v, values):
        """Validate sum d_j = d, d_0 >= 1 and one block per column"""
        n = values.get("dim_state")
        d = values.get("dim_control")
        if n is not None and len(v) != n + 1:
            raise ValueError(f"control_split must have {n + 1} entries, got {len(v)}")
        if any(dj < 0 for dj in v) or v[0] < 1:
            raise ValueError(f"control_split entries must be non-negative with d_0 >= 1, got {v}")
        if d is not None and sum(v) != d:
            raise ValueError(f"control_split must sum to dim_control={d}, got {sum(v)}")
        return v

    @validator("drift_coefficient")
    def validate_drift(cls, v, values):
        """Validate the drift dimensions"""
        split = values.get("control_split")
        if split is not None and v.control_dim != split[0]:
            raise ValueError(f"drift control dimension {v.control_dim} does not match d_0={split[0]}")
        if values.get("dim_state") is not None and v.state_dim != values["dim_state"]:
            raise ValueError("drift state dimension does not match dim_state")
        return v

    @validator("diffusion_cols")
    def validate_columns(cls, v, values):
        """Validate one column per Brownian coordinate, controlled exactly when d_j > 0"""
        n = values.get("dim_state")
        split = values.get("control_split")
        if n is not None and len(v) != n:
            raise ValueError(f"expected {n} diffusion columns, got {len(v)}")
        if split is not None:
            for j, column in enumerate(v, start=1):
                if split[j] == 0 and not isinstance(column, LinearColumn):
                    raise ValueError(f"column {j} has d_j = 0 and must be a LinearColumn")
                if split[j] > 0 and (not isinstance(column, ControlledColumn) or column.control_dim != split[j]):
                    raise ValueError(f"column {j} must be a ControlledColumn with {split[j]} controls")
        return v

    @validator("running_cost_terms")
    def validate_costs(cls, v, values):
        """Validate f^0 present and f^j present for every controlled column"""
        split = values.get("control_split")
        if split is not None:
            if len(v) != len(split):
                raise ValueError(f"expected {len(split)} running cost terms, got {len(v)}")
            for j, term in enumerate(v):
                if split[j] > 0 and term is None:
                    raise ValueError(f"running cost term {j} is required since d_{j} > 0")
                if term is not None and term.control_dim != split[j]:
                    raise ValueError(f"running cost term {j} expects {term.control_dim} controls, d_{j}={split[j]}")
        return v

    @validator("constants")
    def validate_constants(cls, v, values):
        """Cross-check the stored count l against the split"""
        split = values.get("control_split")
        if split is not None:
            expected = sum(1 for dj in split[1:] if dj > 0)
            if v.l != expected:
                raise ValueError(f"constants.l = {v.l} but the control split has {expected} controlled columns")
        return v

    # -- structure --------------------------------------------------------

    @property
    def feature_dim(self) -> int:
        return self.features.dim

    @property
    def control_slices(self) -> List[slice]:
        offsets = np.concatenate([[0], np.cumsum(self.control_split)])
        return [slice(int(offsets[j]), int(offsets[j + 1])) for j in range(len(self.control_split))]

    @property
    def controlled_columns(self) -> List[int]:
        """1-based indices j of columns with d_j > 0"""
        return [j for j in range(1, self.dim_state + 1) if self.control_split[j] > 0]

    @property
    def control_free_diffusion(self) -> bool:
        return not self.controlled_columns

    @property
    def has_second_derivatives(self) -> bool:
        parts = [self.drift_coefficient, self.terminal_cost]
        parts += [c.coefficient for c in self.diffusion_cols if isinstance(c, ControlledColumn)]
        parts += [f for f in self.running_cost_terms if f is not None]
        return all(p.has_second_derivatives for p in parts)

    def require_second_derivatives(self, operation: str):
        if not self.has_second_derivatives:
            raise MissingDerivatives(f"{operation} requires second-derivative callbacks on every coefficient")

    def split_controls(self, u: np.ndarray) -> List[np.ndarray]:
        return [u[:, s] for s in self.control_slices]

    def cross_section(self, states: np.ndarray) -> CrossSection:
        norms = np.linalg.norm(states, axis=1)
        return CrossSection(
            mean=states.mean(axis=0),
            moments=self.features.moments(states),
            first_moment=float(norms.mean()),
            second_moment=float(np.sqrt(np.mean(norms**2))),
        )

    def resolve(self, mu: Union[EmpiricalMeasure, CrossSection]) -> CrossSection:
        if isinstance(mu, CrossSection):
            return mu
        return self.cross_section(mu.points)

    # -- drift ------------------------------------------------------------

    def drift(self, t, x, mu, v0) -> np.ndarray:
        c = self.resolve(mu)
        return _call("drift", self.drift_coefficient.value, t, np.atleast_2d(x), c.moments, np.atleast_2d(v0))

    def drift_dx(self, t, x, mu, v0) -> np.ndarray:
        c = self.resolve(mu)
        return _call("drift_dx", self.drift_coefficient.dx, t, np.atleast_2d(x), c.moments, np.atleast_2d(v0))

    def drift_dv(self, t, x, mu, v0) -> np.ndarray:
        c = self.resolve(mu)
        return _call("drift_dv", self.drift_coefficient.dw, t, np.atleast_2d(x), c.moments, np.atleast_2d(v0))

    def drift_dnu(self, t, x, mu, v0, y) -> np.ndarray:
        """D_y(dB/dnu)(t, x, mu, v0)(y) as an (N, n, n) batch, rows of x paired with rows of y"""
        c = self.resolve(mu)
        x = np.atleast_2d(x)
        y = np.broadcast_to(np.atleast_2d(y), x.shape)
        b_m = _call("drift_dm", self.drift_coefficient.dm, t, x, c.moments, np.atleast_2d(v0))
        return np.einsum("iak,ikb->iab", b_m, _call("features", self.features.jacobian, y))

    # -- diffusion, jumps, costs -------------------------------------------

    def diffusion(self, t: float, x: np.ndarray, cross: CrossSection, u: np.ndarray) -> np.ndarray:
        """(N, n, n) with column j equal to sigma^j"""
        blocks = self.split_controls(u)
        columns = []
        for j, column in enumerate(self.diffusion_cols, start=1):
            if isinstance(column, LinearColumn):
                columns.append(np.broadcast_to(column.value(t, x, cross.mean), x.shape))
            else:
                columns.append(_call(f"column{j}", column.coefficient.value, t, x, cross.moments, blocks[j]))
        return np.stack(columns, axis=2)

    def jump(self, t: float, x: np.ndarray, cross: CrossSection, mark: np.ndarray) -> np.ndarray:
        if self.jump_coeff is None:
            return np.zeros_like(x)
        return np.broadcast_to(self.jump_coeff.value(t, x, cross.mean, mark), x.shape)

    def jump_coefficients(self, t: float, mark: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.dim_state
        if self.jump_coeff is None:
            return np.zeros(n), np.zeros((n, n)), np.zeros((n, n))
        return self.jump_coeff.coefficients(t, mark)

    def running_cost(self, t: float, x: np.ndarray, cross: CrossSection, u: np.ndarray) -> np.ndarray:
        blocks = self.split_controls(u)
        total = np.zeros(len(x))
        for j, term in enumerate(self.running_cost_terms):
            if term is not None:
                total = total + _call(f"running_cost{j}", term.value, t, x, cross.moments, blocks[j])
        return total

    def terminal(self, x: np.ndarray, cross: CrossSection) -> np.ndarray:
        return _call("terminal_cost", self.terminal_cost.value, x, cross.moments)

    def increment(
        self,
        t: float,
        x: np.ndarray,
        cross: CrossSection,
        u: np.ndarray,
        dB: np.ndarray,
        dN: np.ndarray,
        jm: JumpMeasure,
        dt: float,
    ) -> np.ndarray:
        """Euler step with compensated atomic jumps, coefficients evaluated at the left point"""
        drift = self.drift(t, x, cross, self.split_controls(u)[0])
        step = drift * dt + np.einsum("iaj,ij->ia", self.diffusion(t, x, cross, u), dB)
        for a, (mark, weight) in enumerate(jm.atoms):
            compensated = dN[:, a] - weight * dt
            step = step + self.jump(t, x, cross, mark) * compensated[:, None]
        return step


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------


def check_sufficiency_condition(c: AssumptionConstants) -> ConditionReport:
    """Evaluate the two sufficiency inequalities; margins are left minus right"""
    L2sq = c.L**2
    lhs_i = 2.0 * c.lambda_v
    rhs_i = L2sq * c.L2 / c.lambda0
    first = lhs_i - rhs_i
    second_factor = 2.0 * c.lambda_x + 2.0 * c.lambda_m - 5.0 * (c.l + 1) * L2sq * c.L0 / c.lambda0
    lhs_ii = first * second_factor
    rhs_ii = 4.0 * (c.l + 1) * c.L**4 * c.L1**2 / c.lambda0**2
    return ConditionReport(
        holds_i=bool(lhs_i > rhs_i),
        holds_ii=bool(lhs_ii > rhs_ii),
        margin_i=float(first),
        margin_ii=float(lhs_ii - rhs_ii),
    )


def _fd(fn: Callable[[np.ndarray], np.ndarray], z: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a batched map along each coordinate of z, stacked on the last axis"""
    z = np.asarray(z, dtype=float)
    columns = []
    for b in range(z.shape[-1]):
        step = np.zeros_like(z)
        step[..., b] = h
        columns.append((np.asarray(fn(z + step)) - np.asarray(fn(z - step))) / (2.0 * h))
    return np.stack(columns, axis=-1)


class _ConsistencyChecker:
    """Collects worst-case finite-difference disagreements per callback"""

    def __init__(self, tol: float):
        self.tol = tol
        self.worst: Dict[str, DerivativeViolation] = {}

    def compare(self, name: str, analytic: np.ndarray, reference: np.ndarray):
        analytic = np.asarray(analytic, dtype=float)
        reference = np.asarray(reference, dtype=float).reshape(analytic.shape)
        batch = analytic.shape[0]
        diff = np.abs(analytic - reference).reshape(batch, -1).max(axis=1, initial=0.0)
        scale = np.maximum(1.0, np.abs(reference).reshape(batch, -1).max(axis=1, initial=0.0))
        ratio = diff / scale
        probe = int(np.argmax(ratio))
        if ratio[probe] > self.tol:
            current = self.worst.get(name)
            if current is None or diff[probe] / scale[probe] > current.error / current.scale:
                self.worst[name] = DerivativeViolation(
                    callback=name, probe=probe, error=float(diff[probe]), scale=float(scale[probe])
                )

    def violations(self) -> List[DerivativeViolation]:
        return list(self.worst.values())


def _check_map(check: _ConsistencyChecker, name: str, F: ControlledMap, t, x, M, w, h: float):
    check.compare(f"{name}_dx", _call(f"{name}_dx", F.dx, t, x, M, w), _fd(lambda z: F.value(t, z, M, w), x, h))
    if F.control_dim:
        check.compare(f"{name}_dv", _call(f"{name}_dv", F.dw, t, x, M, w), _fd(lambda z: F.value(t, x, M, z), w, h))
    per_probe_m = np.stack(
        [_fd(lambda m: F.value(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))]
    )
    check.compare(f"{name}_dm", _call(f"{name}_dm", F.dm, t, x, M, w), per_probe_m)
    if not F.has_second_derivatives:
        return
    check.compare(f"{name}_dxx", F.dxx(t, x, M, w), _fd(lambda z: F.dx(t, z, M, w), x, h))
    if F.control_dim:
        check.compare(f"{name}_dxv", F.dxw(t, x, M, w), _fd(lambda z: F.dx(t, x, M, z), w, h))
        check.compare(f"{name}_dvv", F.dww(t, x, M, w), _fd(lambda z: F.dw(t, x, M, z), w, h))
        dwm = np.stack([_fd(lambda m: F.dw(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))])
        check.compare(f"{name}_dvm", F.dwm(t, x, M, w), dwm)
    dxm = np.stack([_fd(lambda m: F.dx(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))])
    check.compare(f"{name}_dxm", F.dxm(t, x, M, w), dxm)
    dmm = np.stack([_fd(lambda m: F.dm(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))])
    check.compare(f"{name}_dmm", F.dmm(t, x, M, w), dmm)


def _check_cost(check: _ConsistencyChecker, name: str, f: ScalarCost, t, x, M, w, h: float):
    check.compare(f"{name}_dx", _call(f"{name}_dx", f.dx, t, x, M, w), _fd(lambda z: f.value(t, z, M, w), x, h))
    if f.control_dim:
        check.compare(f"{name}_dv", _call(f"{name}_dv", f.dw, t, x, M, w), _fd(lambda z: f.value(t, x, M, z), w, h))
    dm = np.stack([_fd(lambda m: f.value(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))])
    check.compare(f"{name}_dm", _call(f"{name}_dm", f.dm, t, x, M, w), dm)
    if not f.has_second_derivatives:
        return
    check.compare(f"{name}_dxx", f.dxx(t, x, M, w), _fd(lambda z: f.dx(t, z, M, w), x, h))
    if f.control_dim:
        check.compare(f"{name}_dxv", f.dxw(t, x, M, w), _fd(lambda z: f.dx(t, x, M, z), w, h))
        check.compare(f"{name}_dvv", f.dww(t, x, M, w), _fd(lambda z: f.dw(t, x, M, z), w, h))
        dwm = np.stack([_fd(lambda m: f.dw(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))])
        check.compare(f"{name}_dvm", f.dwm(t, x, M, w), dwm)
    dxm = np.stack([_fd(lambda m: f.dx(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))])
    check.compare(f"{name}_dxm", f.dxm(t, x, M, w), dxm)
    dmm = np.stack([_fd(lambda m: f.dm(t, x[i : i + 1], m, w[i : i + 1])[0], M, h) for i in range(len(x))])
    check.compare(f"{name}_dmm", f.dmm(t, x, M, w), dmm)


def verify_derivative_consistency(
    m: ModelSpec,
    probes: int = 20,
    h: float = 1e-5,
    tol: float = 1e-6,
    jm: Optional[JumpMeasure] = None,
    seed: int = 0,
    cloud_size: int = 8,
) -> List[DerivativeViolation]:
    """Compare every analytic derivative callback against central finite differences.

    Measure derivatives are tested twice: directly in the moment vector, and
    through D_y(dF/dnu) by moving one particle of a cloud of cloud_size points
    and scaling the response by cloud_size.

    Returns:
        One entry per callback whose worst relative disagreement exceeds tol
    """
    if probes < 1 or not h > 0.0 or not tol > 0.0:
        raise ValueError("probes must be >= 1 and h, tol positive")
    n = m.dim_state
    rng = np.random.default_rng(seed)
    t = float(rng.uniform(0.0, 1.0))
    x = rng.standard_normal((probes, n))
    cloud = rng.standard_normal((cloud_size, n))
    cross = m.cross_section(cloud)
    M = cross.moments
    u = rng.standard_normal((probes, m.dim_control))
    blocks = m.split_controls(u)
    check = _ConsistencyChecker(tol)

    y = cloud[np.arange(probes) % cloud_size]
    check.compare(
        "features_jacobian",
        _call("features", m.features.jacobian, y),
        _fd(lambda z: m.features.value(z), y, h),
    )
    check.compare("features_hessian", m.features.hessian(y), _fd(lambda z: m.features.jacobian(z), y, h))

    _check_map(check, "drift", m.drift_coefficient, t, x, M, blocks[0], h)
    drift_dnu = m.drift_dnu(t, x, cross, blocks[0], y)
    check.compare(
        "drift_dnu",
        drift_dnu,
        _particle_fd(m, cloud, x, h, lambda c, i: m.drift(t, x[i : i + 1], c, blocks[0][i : i + 1])[0]),
    )

    for j, column in enumerate(m.diffusion_cols, start=1):
        if isinstance(column, LinearColumn):
            check.compare(
                f"column{j}_sigma1",
                np.broadcast_to(column.sigma1(t), (probes, n, n)),
                _fd(lambda z: column.value(t, z, cross.mean), x, h),
            )
            check.compare(
                f"column{j}_sigma2",
                column.sigma2(t)[None],
                _fd(lambda z: column.value(t, x[:1], z[0])[None], cross.mean[None], h)[0],
            )
        else:
            _check_map(check, f"column{j}", column.coefficient, t, x, M, blocks[j], h)

    if jm is not None and m.jump_coeff is not None:
        for a, mark in enumerate(jm.marks):
            g0, g1, g2 = m.jump_coefficients(t, mark)
            check.compare(
                f"jump{a}_gamma1",
                np.broadcast_to(g1, (probes, n, n)),
                _fd(lambda z: m.jump_coeff.value(t, z, cross.mean, mark), x, h),
            )
            check.compare(
                f"jump{a}_gamma2",
                g2[None],
                _fd(lambda z: m.jump_coeff.value(t, x[:1], z[0], mark)[None], cross.mean[None], h)[0],
            )

    for j, term in enumerate(m.running_cost_terms):
        if term is None:
            continue
        _check_cost(check, f"running_cost{j}", term, t, x, M, blocks[j], h)
        analytic = np.einsum("ik,ikb->ib", term.dm(t, x, M, blocks[j]), m.features.jacobian(y))
        check.compare(
            f"running_cost{j}_dnu",
            analytic,
            _particle_fd(m, cloud, x, h, lambda c, i: term.value(t, x[i : i + 1], c.moments, blocks[j][i : i + 1])),
        )

    g = m.terminal_cost
    check.compare("terminal_cost_dx", _call("terminal_cost_dx", g.dx, x, M), _fd(lambda z: g.value(z, M), x, h))
    dm = np.stack([_fd(lambda mm: g.value(x[i : i + 1], mm)[0], M, h) for i in range(probes)])
    check.compare("terminal_cost_dm", _call("terminal_cost_dm", g.dm, x, M), dm)
    check.compare(
        "terminal_cost_dnu",
        np.einsum("ik,ikb->ib", g.dm(x, M), m.features.jacobian(y)),
        _particle_fd(m, cloud, x, h, lambda c, i: g.value(x[i : i + 1], c.moments)),
    )
    if g.has_second_derivatives:
        check.compare("terminal_cost_dxx", g.dxx(x, M), _fd(lambda z: g.dx(z, M), x, h))
        dxm = np.stack([_fd(lambda mm: g.dx(x[i : i + 1], mm)[0], M, h) for i in range(probes)])
        check.compare("terminal_cost_dxm", g.dxm(x, M), dxm)
        dmm = np.stack([_fd(lambda mm: g.dm(x[i : i + 1], mm)[0], M, h) for i in range(probes)])
        check.compare("terminal_cost_dmm", g.dmm(x, M), dmm)

    violations = check.violations()
    for violation in violations:
        logger.warning(
            f"Derivative callback {violation.callback} disagrees with finite differences "
            f"(probe {violation.probe}, error {violation.error:.3e})"
        )
    return violations


def _particle_fd(
    m: ModelSpec, cloud: np.ndarray, x: np.ndarray, h: float, evaluate: Callable[[CrossSection, int], np.ndarray]
) -> np.ndarray:
    """M * central difference of a coefficient when particle (i mod M) of the cloud moves"""
    size = len(cloud)
    rows = []
    for i in range(len(x)):
        index = i % size
        columns = []
        for b in range(m.dim_state):
            plus = cloud.copy()
            minus = cloud.copy()
            plus[index, b] += h
            minus[index, b] -= h
            diff = evaluate(m.cross_section(plus), i) - evaluate(m.cross_section(minus), i)
            columns.append(size * np.asarray(diff, dtype=float).reshape(-1) / (2.0 * h))
        stacked = np.stack(columns, axis=-1)
        rows.append(stacked if stacked.shape[0] > 1 else stacked[0])
    return np.stack(rows)


def estimate_constants(
    m: ModelSpec, jm: Optional[JumpMeasure] = None, box: float = 2.0, samples: int = 256, seed: int = 0
) -> EmpiricalConstants:
    """Empirical Lipschitz, non-degeneracy and convexity constants on the box [-box, box]^n.

    Disagreement with the supplied constants is logged, never raised: the
    supplied constants remain the auditable inputs of every certificate.
    """
    n = m.dim_state
    rng = np.random.default_rng(seed)
    t = 0.0
    x = rng.uniform(-box, box, (samples, n))
    cloud = rng.uniform(-box, box, (samples, n))
    cross = m.cross_section(cloud)
    u = rng.uniform(-box, box, (samples, m.dim_control))
    blocks = m.split_controls(u)
    y = cloud

    bounds = []
    B = m.drift_coefficient
    b_x = B.dx(t, x, cross.moments, blocks[0])
    b_v = B.dw(t, x, cross.moments, blocks[0])
    bounds += [np.linalg.norm(b_x, ord=2, axis=(1, 2)).max(), np.linalg.norm(b_v, ord=2, axis=(1, 2)).max()]
    b_nu = m.drift_dnu(t, x, cross, blocks[0], y)
    bounds.append(np.linalg.norm(b_nu, ord=2, axis=(1, 2)).max())
    for j, column in enumerate(m.diffusion_cols, start=1):
        if isinstance(column, LinearColumn):
            bounds += [np.linalg.norm(column.sigma1(t), 2), np.linalg.norm(column.sigma2(t), 2)]
        else:
            A = column.coefficient
            bounds.append(np.linalg.norm(A.dx(t, x, cross.moments, blocks[j]), ord=2, axis=(1, 2)).max())
            bounds.append(np.linalg.norm(A.dw(t, x, cross.moments, blocks[j]), ord=2, axis=(1, 2)).max())
    if jm is not None:
        for mark in jm.marks:
            _, g1, g2 = m.jump_coefficients(t, mark)
            bounds += [np.linalg.norm(g1, 2), np.linalg.norm(g2, 2)]
    l1 = 1.0 + np.linalg.norm(x, axis=1) + cross.first_moment
    for j, term in enumerate(m.running_cost_terms):
        if term is not None and term.control_dim:
            grad = np.linalg.norm(term.dw(t, x, cross.moments, blocks[j]), axis=1)
            bounds.append((grad / (l1 + np.linalg.norm(blocks[j], axis=1))).max())
    L_est = float(max(bounds))

    gram = np.einsum("iae,ibe->iab", b_v, b_v)
    lambda0_est = float(np.linalg.eigvalsh(gram).min())

    f0 = m.running_cost_terms[0]
    if f0.has_second_derivatives:
        hess = f0.dww(t, x, cross.moments, blocks[0])
    else:
        hess = _fd(lambda z: f0.dw(t, x, cross.moments, z), blocks[0], 1e-5)
    lambda_v_est = 0.5 * float(np.linalg.eigvalsh(0.5 * (hess + np.swapaxes(hess, 1, 2))).min())

    drift_norm = np.linalg.norm(B.value(t, x, cross.moments, blocks[0]), axis=1)
    v_norm = np.linalg.norm(blocks[0], axis=1)
    growth_l1 = float((drift_norm / (l1 + v_norm)).max())
    growth_l2 = float((drift_norm / (1.0 + np.linalg.norm(x, axis=1) + cross.second_moment + v_norm)).max())

    disagreements = []
    c = m.constants
    if c.L < L_est * (1.0 - 1e-9):
        disagreements.append(f"L={c.L} below estimate {L_est:.4g}")
    if c.lambda0 > lambda0_est * (1.0 + 1e-9):
        disagreements.append(f"lambda0={c.lambda0} above estimate {lambda0_est:.4g}")
    if c.lambda_v > lambda_v_est * (1.0 + 1e-9) + 1e-12:
        disagreements.append(f"lambda_v={c.lambda_v} above estimate {lambda_v_est:.4g}")
    for message in disagreements:
        logger.warning(f"Supplied constant more optimistic than sampled estimate: {message}")

    return EmpiricalConstants(
        L=L_est,
        lambda0=lambda0_est,
        lambda_v=lambda_v_est,
        growth_l1=growth_l1,
        growth_l2=growth_l2,
        disagreements=disagreements,
    )


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------


JumpCoefficients = Tuple[Sequence[float], Sequence[float], Sequence[float]]


def _diagonal(values, n: int, name: str) -> np.ndarray:
    array = np.broadcast_to(np.atleast_1d(np.asarray(values, dtype=float)), (n,)).copy()
    if not np.all(np.isfinite(array)):
        raise DomainError(f"{name} must be finite")
    return array


def affine_constants(
    coefficient_bound: float,
    c: np.ndarray,
    r: np.ndarray,
    q: np.ndarray,
    qbar: np.ndarray,
    l: int = 0,
) -> AssumptionConstants:
    """Constants of a diagonal affine-quadratic model: L at least 1, lambda0 = min c^2, convexity halves"""
    return AssumptionConstants(
        L=max(1.0, float(coefficient_bound)),
        lambda0=float(np.min(c**2)),
        lambda_v=float(np.min(r)) / 2.0,
        lambda_x=float(np.min(q)) / 2.0,
        lambda_m=float(np.min(qbar)) / 2.0,
        l=l,
    )


def _jump_block(
    jm: Optional[JumpMeasure], jumps: Optional[Sequence[JumpCoefficients]], n: int
) -> Tuple[Optional[LinearJump], List[float]]:
    if jm is None or jm.size == 0:
        return None, []
    if jumps is None or len(jumps) != jm.size:
        raise DomainError(f"expected one (gamma0, gamma1, gamma2) triple per jump atom ({jm.size})")
    triples = []
    bounds = []
    for g0, g1, g2 in jumps:
        g0 = _diagonal(g0, n, "gamma0")
        g1 = _diagonal(g1, n, "gamma1")
        g2 = _diagonal(g2, n, "gamma2")
        triples.append((g0, np.diag(g1), np.diag(g2)))
        bounds += [np.abs(g1).max(), np.abs(g2).max()]
    return LinearJump.per_atom(jm, triples, n), bounds


def affine_model(
    a,
    abar,
    c,
    sigma0,
    sigma1=0.0,
    sigma2=0.0,
    q=1.0,
    qbar=0.0,
    r=1.0,
    h=0.0,
    hbar=0.0,
    jm: Optional[JumpMeasure] = None,
    jumps: Optional[Sequence[JumpCoefficients]] = None,
    constants: Optional[AssumptionConstants] = None,
    noise_loading=None,
    noise_cost=None,
    dim_state: Optional[int] = None,
) -> ModelSpec:
    """Diagonal linear-quadratic model.

    Every coefficient is a per-coordinate scalar (broadcast to the state
    dimension): b = a x + abar mean + c v^0, sigma^j = sigma0_j + sigma1_j x_j
    + sigma2_j mean_j on coordinate j, jumps likewise per atom, and costs
    f^0 = sum (q x^2 + qbar mean^2 + r v^2)/2, g = sum (h x^2 + hbar mean^2)/2.

    With noise_loading e, column j additionally carries a scalar control
    e_j v^j charged at noise_cost_j |v^j|^2 / 2, so the diffusion becomes
    control-dependent.
    """
    n = dim_state or np.atleast_1d(np.asarray(a)).size
    a, abar, c = _diagonal(a, n, "a"), _diagonal(abar, n, "abar"), _diagonal(c, n, "c")
    sigma0 = _diagonal(sigma0, n, "sigma0")
    sigma1 = _diagonal(sigma1, n, "sigma1")
    sigma2 = _diagonal(sigma2, n, "sigma2")
    q, qbar, r = _diagonal(q, n, "q"), _diagonal(qbar, n, "qbar"), _diagonal(r, n, "r")
    h, hbar = _diagonal(h, n, "h"), _diagonal(hbar, n, "hbar")
    if np.any(r <= 0.0):
        raise DomainError(f"r must be positive, got {r.tolist()}")

    loading = np.zeros(n) if noise_loading is None else _diagonal(noise_loading, n, "noise_loading")
    loading_cost = np.ones(n) if noise_cost is None else _diagonal(noise_cost, n, "noise_cost")
    if np.any(loading_cost[loading != 0.0] <= 0.0):
        raise DomainError("noise_cost must be positive on loaded columns")
    split = [n] + [1 if loading[j] != 0.0 else 0 for j in range(n)]

    features = LinearFeatures(n)
    columns: List[DiffusionColumn] = []
    costs: List[Optional[ScalarCost]] = [QuadraticCost(np.diag(q), np.diag(qbar), np.diag(r))]
    for j in range(n):
        unit = np.zeros(n)
        unit[j] = 1.0
        if split[j + 1]:
            columns.append(
                ControlledColumn(
                    AffineMap(
                        np.diag(sigma1[j] * unit),
                        np.diag(sigma2[j] * unit),
                        (loading[j] * unit)[:, None],
                        offset=sigma0[j] * unit,
                    )
                )
            )
            costs.append(QuadraticCost(np.zeros((n, n)), np.zeros((n, n)), [[loading_cost[j]]]))
        else:
            columns.append(LinearColumn(sigma0[j] * unit, np.diag(sigma1[j] * unit), np.diag(sigma2[j] * unit), n))
            costs.append(None)

    jump_coeff, jump_bounds = _jump_block(jm, jumps, n)
    if constants is None:
        bound = max(
            [np.abs(v).max() for v in (a, abar, c, sigma1, sigma2, q, qbar, r, h, hbar, loading)]
            + jump_bounds
            + [np.abs(loading_cost[loading != 0.0]).max(initial=0.0)]
        )
        l = sum(split[1:])
        convex_r = np.concatenate([r, loading_cost[loading != 0.0]])
        constants = affine_constants(bound, c, convex_r, q, qbar, l)

    return ModelSpec(
        dim_state=n,
        dim_control=sum(split),
        control_split=split,
        features=features,
        drift_coefficient=AffineMap(np.diag(a), np.diag(abar), np.diag(c)),
        diffusion_cols=columns,
        jump_coeff=jump_coeff,
        running_cost_terms=costs,
        terminal_cost=QuadraticTerminalCost(np.diag(h), np.diag(hbar)),
        constants=constants,
    )


def example_drift_model(
    epsilon: float,
    sigma0: float = 1.0,
    q: float = 1.0,
    qbar: float = 0.0,
    r: float = 1.0,
    h: float = 0.0,
    hbar: float = 0.0,
    jm: Optional[JumpMeasure] = None,
    jumps: Optional[Sequence[JumpCoefficients]] = None,
    constants: Optional[AssumptionConstants] = None,
) -> ModelSpec:
    """The nonlinear drift example with quadratic costs and additive noise.

    Default constants use |B_x| <= 1 + |eps|, B_v >= 1 - |eps|/e and
    second derivatives of B bounded by 2|eps|.
    """
    drift, features = builtin_example_drift(epsilon)
    if r <= 0.0:
        raise DomainError(f"r must be positive, got {r}")
    jump_coeff, jump_bounds = _jump_block(jm, jumps, 1)
    if constants is None:
        eps = abs(float(epsilon))
        curvature = 2.0 * eps
        constants = AssumptionConstants(
            L=max([1.0 + eps, abs(q), abs(qbar), r, abs(h), abs(hbar)] + jump_bounds),
            L0=curvature,
            L1=curvature,
            L2=curvature,
            lambda0=(1.0 - eps / np.e) ** 2,
            lambda_v=r / 2.0,
            lambda_x=q / 2.0,
            lambda_m=qbar / 2.0,
        )
    return ModelSpec(
        dim_state=1,
        dim_control=1,
        control_split=[1, 0],
        features=features,
        drift_coefficient=drift,
        diffusion_cols=[LinearColumn([sigma0], [[0.0]], [[0.0]], 1)],
        jump_coeff=jump_coeff,
        running_cost_terms=[QuadraticCost([[q]], np.diag([qbar, 0.0]), [[r]]), None],
        terminal_cost=QuadraticTerminalCost([[h]], np.diag([hbar, 0.0])),
        constants=constants,
    )


# ---------------------------------------------------------------------------
# Fault injection
# ---------------------------------------------------------------------------


class _OffsetMap(ControlledMap):
    """Delegates to a map, adding constants to selected first derivatives"""

    def __init__(self, inner: ControlledMap, offsets: Dict[str, float]):
        super().__init__(inner.state_dim, inner.control_dim, inner.feature_dim)
        self.inner = inner
        self.offsets = offsets
        self.has_second_derivatives = inner.has_second_derivatives

    def value(self, t, x, M, w):
        return self.inner.value(t, x, M, w)

    def dx(self, t, x, M, w):
        return self.inner.dx(t, x, M, w) + self.offsets.get("dx", 0.0)

    def dw(self, t, x, M, w):
        return self.inner.dw(t, x, M, w) + self.offsets.get("dv", 0.0)

    def dm(self, t, x, M, w):
        return self.inner.dm(t, x, M, w) + self.offsets.get("dm", 0.0)

    def dxx(self, t, x, M, w):
        return self.inner.dxx(t, x, M, w)

    def dxw(self, t, x, M, w):
        return self.inner.dxw(t, x, M, w)

    def dww(self, t, x, M, w):
        return self.inner.dww(t, x, M, w)

    def dxm(self, t, x, M, w):
        return self.inner.dxm(t, x, M, w)

    def dwm(self, t, x, M, w):
        return self.inner.dwm(t, x, M, w)

    def dmm(self, t, x, M, w):
        return self.inner.dmm(t, x, M, w)


class _OffsetTerminal(TerminalCost):
    def __init__(self, inner: TerminalCost, offsets: Dict[str, float]):
        super().__init__(inner.state_dim, inner.feature_dim)
        self.inner = inner
        self.offsets = offsets
        self.has_second_derivatives = inner.has_second_derivatives

    def value(self, x, M):
        return self.inner.value(x, M)

    def dx(self, x, M):
        return self.inner.dx(x, M) + self.offsets.get("dx", 0.0)

    def dm(self, x, M):
        return self.inner.dm(x, M) + self.offsets.get("dm", 0.0)

    def dxx(self, x, M):
        return self.inner.dxx(x, M)

    def dxm(self, x, M):
        return self.inner.dxm(x, M)

    def dmm(self, x, M):
        return self.inner.dmm(x, M)


def with_derivative_offsets(m: ModelSpec, offsets: Dict[str, float]) -> ModelSpec:
    """Copy of m whose named derivative callbacks are shifted by constants.

    Keys are drift_dx, drift_dv, drift_dm, terminal_cost_dx and terminal_cost_dm.
    Used to check that verify_derivative_consistency catches wrong callbacks.
    """
    drift = {}
    terminal = {}
    for name, offset in offsets.items():
        prefix, _, derivative = name.rpartition("_")
        if prefix == "drift" and derivative in ("dx", "dv", "dm"):
            drift[derivative] = float(offset)
        elif prefix == "terminal_cost" and derivative in ("dx", "dm"):
            terminal[derivative] = float(offset)
        else:
            raise DomainError(f"unknown derivative callback '{name}'")
    update = {}
    if drift:
        update["drift_coefficient"] = _OffsetMap(m.drift_coefficient, drift)
    if terminal:
        update["terminal_cost"] = _OffsetTerminal(m.terminal_cost, terminal)
    return m.model_copy(update=update)
