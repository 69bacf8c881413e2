"""
Tests for Jacobian flows and pinned particles
"""

import numpy as np
import pytest

from mfjump.exceptions import DomainError, MissingDerivatives
from mfjump.problem import affine_model
from mfjump.sensitivity import (
    pinned_jacobian_finite_difference,
    solve_jacobian_flow,
    solve_pinned_flow,
    solve_pinned_jacobian,
    write_pinned_csv,
)
from mfjump.solver import solve_mftc
from tests.helpers import FirstOrderDrift, deterministic_lq, gaussian_cloud, small_config


@pytest.fixture(scope="module")
def baseline():
    """Deterministic LQ solution, where P_0 is proportional to Y_0"""
    m, jm = deterministic_lq().to_model()
    cfg = small_config()
    solution = solve_mftc(m, jm, gaussian_cloud(cfg.particles), cfg)
    Y0 = solution.ensemble.states[0, :, 0]
    P0 = solution.adjoint.P[0, :, 0]
    slope = float(Y0 @ P0 / (Y0 @ Y0))
    return m, jm, cfg, solution, slope


class TestJacobianFlow:
    """Test the Gateaux derivative of the solution"""

    def test_linear_response(self, baseline):
        m, jm, cfg, solution, slope = baseline
        eta = np.random.default_rng(1).standard_normal((cfg.particles, 1))

        flow = solve_jacobian_flow(m, jm, solution, eta, cfg)
        assert flow.converged
        assert flow.dY[0] == pytest.approx(eta)
        assert flow.dP[0] == pytest.approx(slope * eta, rel=1e-3, abs=1e-6)
        assert flow.du.shape == solution.ensemble.controls.shape
        assert flow.boundedness > 0.0

    def test_zero_direction(self, baseline):
        m, jm, cfg, solution, _ = baseline

        flow = solve_jacobian_flow(m, jm, solution, np.zeros(1), cfg)
        assert flow.converged
        assert np.allclose(flow.dP, 0.0)
        assert flow.boundedness is None

    def test_missing_second_derivatives(self):
        m = affine_model(0.0, 0.0, 1.0, 0.0, h=1.0)
        partial = m.model_copy(update={"drift_coefficient": FirstOrderDrift([[0.0]], [[0.0]], [[1.0]])})

        with pytest.raises(MissingDerivatives):
            solve_jacobian_flow(partial, None, None, np.ones(1))


class TestPinnedFlow:
    """Test tagged particles reading the baseline law"""

    def setup_method(self):
        """Set up test environment"""
        self.ys = np.linspace(-1.0, 1.0, 5)[:, None]

    def test_initial_adjoint(self, baseline):
        m, jm, cfg, solution, slope = baseline

        flow = solve_pinned_flow(m, jm, solution, self.ys, cfg, copies=2)
        assert flow.converged
        assert flow.tag_index.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
        assert flow.initial_adjoint == pytest.approx(slope * self.ys, rel=1e-3, abs=1e-6)
        assert flow.initial_control == pytest.approx(-flow.initial_adjoint, abs=1e-5)
        assert flow.initial_R.shape == (5, 0, 1)

    def test_jacobian_matches_finite_difference(self, baseline):
        m, jm, cfg, solution, slope = baseline
        flow = solve_pinned_flow(m, jm, solution, self.ys, cfg, copies=2)

        jacobian = solve_pinned_jacobian(m, jm, solution, flow, cfg)
        fd = pinned_jacobian_finite_difference(m, jm, solution, self.ys, 1e-2, cfg, copies=2)
        assert jacobian.initial_dP.shape == (5, 1, 1)
        assert jacobian.initial_dP[:, 0, 0] == pytest.approx(np.full(5, slope), rel=1e-3)
        assert fd == pytest.approx(jacobian.initial_dP, rel=1e-3)

    def test_grid_mismatch(self, baseline):
        m, jm, _, solution, _ = baseline

        with pytest.raises(DomainError, match="baseline grid"):
            solve_pinned_flow(m, jm, solution, self.ys, small_config(steps=20), copies=2)

    def test_tag_dimension(self, baseline):
        m, jm, cfg, solution, _ = baseline

        with pytest.raises(DomainError, match="columns"):
            solve_pinned_flow(m, jm, solution, np.zeros((2, 3)), cfg, copies=2)

    def test_finite_difference_step(self, baseline):
        m, jm, cfg, solution, _ = baseline

        with pytest.raises(DomainError, match="positive"):
            pinned_jacobian_finite_difference(m, jm, solution, self.ys, 0.0, cfg)

    def test_write_csv(self, baseline, tmp_path):
        m, jm, cfg, solution, _ = baseline
        flow = solve_pinned_flow(m, jm, solution, self.ys, cfg, copies=2)

        path = write_pinned_csv(flow, tmp_path / "pinned.csv")
        table = np.genfromtxt(path, delimiter=",", names=True)
        assert table.dtype.names == ("step", "time", "particle", "tag", "x_1", "v_1")
        assert set(table["tag"].tolist()) == {0.0, 1.0, 2.0, 3.0, 4.0}


if __name__ == "__main__":
    pytest.main([__file__])
