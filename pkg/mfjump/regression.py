"""
Regression Monte Carlo: conditional expectations by polynomial ridge regression
"""

import copy
import logging
from typing import Tuple

import numpy as np
from sklearn.linear_model import Ridge
from sklearn.preprocessing import PolynomialFeatures, StandardScaler

from .config import Config
from .exceptions import SingularRegression
from .models import RegressionConfig

logger = logging.getLogger(__name__)


class Surrogate:
    """Fitted regression function evaluated at new points"""

    def __init__(self, scaler: StandardScaler, poly: PolynomialFeatures, ridge: Ridge, shape: Tuple[int, ...]):
        self._scaler = scaler
        self._poly = poly
        self._ridge = ridge
        self.shape = shape

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        basis = self._poly.transform(self._scaler.transform(points))
        return self._ridge.predict(basis).reshape((len(points),) + self.shape)


class RidgeProjector:
    """E[. | Z] on a fixed sample of conditioning points Z.

    The polynomial basis is built once per sample (standardized features,
    total degree basis_degree, intercept fitted by Ridge) and reused for
    every target regressed on it.
    """

    def __init__(self, regression: RegressionConfig):
        self.config = regression
        self._scaler = StandardScaler()
        self._poly = PolynomialFeatures(degree=regression.basis_degree, include_bias=False)
        self.basis: np.ndarray = np.empty((0, 0))

    def fit(self, points: np.ndarray) -> "RidgeProjector":
        """Build the basis on the conditioning points.

        Raises:
            SingularRegression: If the ridge-regularized normal matrix is still ill-conditioned
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        self.basis = self._poly.fit_transform(self._scaler.fit_transform(points))
        centered = self.basis - self.basis.mean(axis=0)
        gram = centered.T @ centered + self.config.ridge * np.eye(self.basis.shape[1])
        condition = np.linalg.cond(gram)
        if not np.isfinite(condition) or condition > Config.CONDITION_LIMIT:
            raise SingularRegression(
                f"regression normal matrix has condition number {condition:.3e} "
                f"({self.basis.shape[1]} basis functions, {len(points)} samples)"
            )
        return self

    def _ridge(self, targets: np.ndarray) -> Ridge:
        flat = targets.reshape(len(targets), -1)
        ridge = Ridge(alpha=self.config.ridge, fit_intercept=True)
        ridge.fit(self.basis, flat)
        return ridge

    def project(self, targets: np.ndarray) -> np.ndarray:
        """Fitted values of targets (leading particle axis, any trailing shape)"""
        targets = np.asarray(targets, dtype=float)
        if targets.shape[0] != self.basis.shape[0]:
            raise ValueError(f"expected {self.basis.shape[0]} targets, got {targets.shape[0]}")
        if targets.size == 0:
            return np.zeros_like(targets)
        fitted = self._ridge(targets).predict(self.basis).reshape(targets.shape)
        if not np.all(np.isfinite(fitted)):
            raise SingularRegression("regression produced non-finite fitted values")
        return fitted

    def surrogate(self, targets: np.ndarray) -> Surrogate:
        targets = np.asarray(targets, dtype=float)
        return Surrogate(
            copy.deepcopy(self._scaler), copy.deepcopy(self._poly), self._ridge(targets), targets.shape[1:]
        )


def conditional_expectation(
    points: np.ndarray, targets: np.ndarray, regression: RegressionConfig
) -> np.ndarray:
    """One-shot E[targets | points] at the sample points"""
    return RidgeProjector(regression).fit(points).project(targets)


class GroupMeanProjector:
    """E[. | group] as within-group averages.

    Used at knots where the conditioning variable takes a handful of
    distinct values (tagged copies of a few initial points), where a
    polynomial fit cannot reproduce the per-value means.
    """

    def __init__(self, groups: np.ndarray):
        self.labels, self._inverse = np.unique(np.asarray(groups), return_inverse=True)
        self._counts = np.bincount(self._inverse).astype(float)

    def project(self, targets: np.ndarray) -> np.ndarray:
        targets = np.asarray(targets, dtype=float)
        if targets.shape[0] != self._inverse.size:
            raise ValueError(f"expected {self._inverse.size} targets, got {targets.shape[0]}")
        sums = np.zeros((self.labels.size,) + targets.shape[1:])
        np.add.at(sums, self._inverse, targets)
        means = sums / self._counts.reshape((-1,) + (1,) * (targets.ndim - 1))
        return means[self._inverse]
