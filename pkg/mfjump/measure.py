"""
Empirical measures: moments, mean-field expectations and Wasserstein-2 distances
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .config import Config
from .exceptions import CallbackFailure, MFJumpError, SizeLimit

logger = logging.getLogger(__name__)


class EmpiricalMeasure:
    """Uniformly weighted particle cloud standing in for the law of the state.

    The points are copied and frozen on construction, so a measure can be
    shared between workers without locking.
    """

    def __init__(self, points: np.ndarray):
        array = np.array(points, dtype=float)
        if array.ndim == 1:
            array = array[:, None]
        if array.ndim != 2 or array.shape[0] < 1:
            raise ValueError(f"points must be an N x n array with N >= 1, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("points must be finite")
        array.setflags(write=False)
        self._points = array

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def size(self) -> int:
        return self._points.shape[0]

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    def mean(self) -> np.ndarray:
        return self._points.mean(axis=0)

    def perturb_particle(self, index: int, delta: np.ndarray) -> "EmpiricalMeasure":
        """Measure with one particle moved by delta (a 1/N-weighted perturbation)"""
        points = self._points.copy()
        points[index] = points[index] + np.asarray(delta, dtype=float)
        return EmpiricalMeasure(points)

    def subsample(self, size: int, seed: int = 0) -> "EmpiricalMeasure":
        """Deterministic subsample without replacement"""
        if size >= self.size:
            return self
        rng = np.random.default_rng(seed)
        index = np.sort(rng.choice(self.size, size=size, replace=False))
        return EmpiricalMeasure(self._points[index])

    @classmethod
    def gaussian(
        cls, mean: Sequence[float], std: Sequence[float], particles: int, seed: int = 0
    ) -> "EmpiricalMeasure":
        """Independent Gaussian draws with diagonal covariance"""
        mean_array = np.atleast_1d(np.asarray(mean, dtype=float))
        std_array = np.broadcast_to(np.atleast_1d(np.asarray(std, dtype=float)), mean_array.shape)
        rng = np.random.default_rng(seed)
        return cls(mean_array + std_array * rng.standard_normal((particles, mean_array.size)))

    @classmethod
    def point_mass(cls, location: Sequence[float], particles: int = 1) -> "EmpiricalMeasure":
        location_array = np.atleast_1d(np.asarray(location, dtype=float))
        return cls(np.tile(location_array, (particles, 1)))

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(N={self.size}, n={self.dim})"


def moment1(mu: EmpiricalMeasure) -> float:
    """|m|_1 = (1/N) sum |x_i|"""
    return float(np.linalg.norm(mu.points, axis=1).mean())


def moment2(mu: EmpiricalMeasure) -> float:
    """|m|_2 = sqrt((1/N) sum |x_i|^2)"""
    return float(np.sqrt(np.mean(np.sum(mu.points**2, axis=1))))


def mf_expectation(
    mu: EmpiricalMeasure, kernel: Callable[[np.ndarray], np.ndarray], vectorized: bool = True
) -> np.ndarray:
    """Uniform average of kernel over the points of mu.

    Args:
        mu: The measure
        kernel: Maps an N x n batch (or a single n-vector when vectorized is False)
            to values with a leading particle axis
        vectorized: Whether the kernel accepts the whole batch

    Returns:
        The average, with the kernel's trailing shape
    """
    try:
        if vectorized:
            values = np.asarray(kernel(mu.points), dtype=float)
        else:
            values = np.stack([np.asarray(kernel(point), dtype=float) for point in mu.points])
    except MFJumpError:
        raise
    except Exception as e:
        raise CallbackFailure("kernel", e) from e
    if values.ndim == 0 or values.shape[0] != mu.size:
        raise CallbackFailure("kernel", ValueError(f"expected a leading axis of length {mu.size}"))
    return values.mean(axis=0)


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, seed: Optional[int] = 0) -> float:
    """Exact W2 between two uniform clouds.

    Clouds of different size are compared after subsampling the larger one
    (without replacement, seeded) to the size of the smaller. One-dimensional
    clouds use the sorted coupling; higher dimensions solve the assignment
    problem exactly and are capped at Config.W2_EXACT_LIMIT particles.
    """
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    size = min(mu.size, nu.size)
    if mu.size != nu.size:
        logger.info(f"Subsampling to {size} particles for W2 ({mu.size} vs {nu.size})")
        mu = mu.subsample(size, seed or 0)
        nu = nu.subsample(size, seed or 0)

    if mu.dim == 1:
        a = np.sort(mu.points[:, 0])
        b = np.sort(nu.points[:, 0])
        return float(np.sqrt(np.mean((a - b) ** 2)))

    if size > Config.W2_EXACT_LIMIT:
        raise SizeLimit(f"exact multi-dimensional W2 is capped at {Config.W2_EXACT_LIMIT} particles, got {size}")
    cost = cdist(mu.points, nu.points, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))
