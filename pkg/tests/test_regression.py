"""
Tests for regression Monte Carlo projectors
"""

from unittest.mock import patch

import numpy as np
import pytest

from mfjump.config import Config
from mfjump.exceptions import SingularRegression
from mfjump.models import RegressionConfig
from mfjump.regression import GroupMeanProjector, RidgeProjector, conditional_expectation


class TestRidgeProjector:
    """Test polynomial ridge regression"""

    def setup_method(self):
        """Set up test environment"""
        rng = np.random.default_rng(0)
        self.points = rng.standard_normal((300, 2))
        self.regression = RegressionConfig(basis_degree=2, ridge=1e-10)

    def test_reproduces_quadratics(self):
        x, y = self.points[:, 0], self.points[:, 1]
        target = 1.0 + 2.0 * x - y + 0.5 * x * y + y**2
        fitted = conditional_expectation(self.points, target, self.regression)

        assert fitted == pytest.approx(target, abs=1e-6)

    def test_projects_out_independent_noise(self):
        noise = np.random.default_rng(1).standard_normal(300)
        target = self.points[:, 0] + noise
        fitted = conditional_expectation(self.points, target, self.regression)

        assert np.corrcoef(fitted, self.points[:, 0])[0, 1] > 0.9

    def test_trailing_shape_preserved(self):
        projector = RidgeProjector(self.regression).fit(self.points)
        targets = np.stack([self.points, 2.0 * self.points], axis=2)

        fitted = projector.project(targets)
        assert fitted.shape == (300, 2, 2)
        assert fitted == pytest.approx(targets, abs=1e-6)

    def test_surrogate_evaluates_new_points(self):
        projector = RidgeProjector(self.regression).fit(self.points)
        surrogate = projector.surrogate(self.points[:, :1] ** 2)

        assert surrogate(np.array([[2.0, 0.0]])) == pytest.approx([[4.0]], abs=1e-5)
        assert surrogate.shape == (1,)

    def test_target_count_checked(self):
        projector = RidgeProjector(self.regression).fit(self.points)

        with pytest.raises(ValueError, match="expected 300 targets"):
            projector.project(np.zeros(10))

    def test_ill_conditioned_basis(self):
        with patch.object(Config, "CONDITION_LIMIT", 1.0):
            with pytest.raises(SingularRegression, match="condition number"):
                RidgeProjector(self.regression).fit(self.points)


class TestGroupMeanProjector:
    """Test within-group averaging"""

    def test_group_means(self):
        projector = GroupMeanProjector(np.array([0, 0, 1, 1, 1]))
        fitted = projector.project(np.array([1.0, 3.0, 0.0, 3.0, 6.0]))

        assert fitted.tolist() == pytest.approx([2.0, 2.0, 3.0, 3.0, 3.0])

    def test_matrix_targets(self):
        projector = GroupMeanProjector(np.array([1, 0, 1]))
        fitted = projector.project(np.arange(6.0).reshape(3, 2))

        assert fitted == pytest.approx(np.array([[2.0, 3.0], [2.0, 3.0], [2.0, 3.0]]))

    def test_target_count_checked(self):
        with pytest.raises(ValueError):
            GroupMeanProjector(np.array([0, 1])).project(np.zeros(3))


if __name__ == "__main__":
    pytest.main([__file__])
