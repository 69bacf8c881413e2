"""
Tests for the value-function checks that re-solve the control problem
"""

import numpy as np
import pytest

from mfjump.config import Config
from mfjump.control import FeedbackPolicy
from mfjump.exceptions import DomainError, NonAdmissible, SufficiencyViolation
from mfjump.measure import EmpiricalMeasure
from mfjump.models import AssumptionConstants
from mfjump.problem import affine_model
from mfjump.runconfig import load_run_config
from mfjump.solver import solve_mftc
from mfjump.value import (
    ValueSample,
    certify_gap,
    dpp_check,
    estimate_time_derivative,
    fit_value_derivatives,
    gateaux_identity_check,
    hjb_residual,
    q_r_characterization_check,
    value_growth,
)
from tests.helpers import FirstOrderDrift, deterministic_lq, gaussian_cloud, small_config


@pytest.fixture(scope="module")
def baseline():
    m, jm = deterministic_lq().to_model()
    cfg = small_config()
    init = gaussian_cloud(cfg.particles)
    return m, jm, cfg, init, solve_mftc(m, jm, init, cfg)


class TestCertifyGap:
    """Test the quadratic optimality gap"""

    def test_shifted_control(self, baseline):
        m, jm, cfg, _, solution = baseline

        certificate = certify_gap(m, jm, solution, solution.ensemble.controls + 0.5, cfg)
        assert certificate.coefficient == pytest.approx(0.5)
        assert certificate.lhs > 0.0
        assert certificate.rhs == pytest.approx(0.5 * 0.25)
        assert certificate.passes

    def test_alternative_policy(self, baseline):
        m, jm, cfg, _, solution = baseline

        policy = FeedbackPolicy.explicit(lambda k, t, X, cross: -0.2 * X)
        assert certify_gap(m, jm, solution, policy, cfg).passes

    def test_non_admissible(self, baseline):
        m, jm, cfg, _, solution = baseline

        with pytest.raises(NonAdmissible):
            certify_gap(m, jm, solution, solution.ensemble.controls + 1e12, cfg)

    def test_insufficient(self, baseline):
        _, jm, cfg, _, _ = baseline
        constants = AssumptionConstants(L=10.0, L2=1.0, lambda0=1.0, lambda_v=0.1, lambda_x=1.0)
        m = affine_model(0.0, 0.0, 1.0, 0.0, h=1.0, constants=constants)

        with pytest.raises(SufficiencyViolation):
            certify_gap(m, jm, None, np.zeros((10, 200, 1)), cfg)


class TestResolvingChecks:
    """Test checks built from additional solves"""

    def test_gateaux_identity(self, baseline):
        m, jm, cfg, init, solution = baseline
        eta = np.ones((cfg.particles, 1))

        check = gateaux_identity_check(m, jm, init, eta, cfg, base=solution, rtol=0.1)
        assert check.passes
        assert check.finite_difference == pytest.approx(check.adjoint_pairing, rel=0.1)

    def test_dpp(self, baseline):
        m, jm, cfg, _, solution = baseline

        check = dpp_check(m, jm, solution, 4, cfg)
        assert check.gap == pytest.approx(0.0, abs=1e-5)
        assert check.value == pytest.approx(check.running_cost + check.continuation_value, abs=1e-5)

    def test_dpp_range(self, baseline):
        m, jm, cfg, _, solution = baseline

        with pytest.raises(DomainError, match="steps_ahead"):
            dpp_check(m, jm, solution, 0, cfg)

    def test_time_derivative(self, baseline):
        m, jm, cfg, init, _ = baseline

        # V(t, mu) = E[x^2]/2 for every t when p = 1
        assert estimate_time_derivative(m, jm, init, cfg) == pytest.approx(0.0, abs=0.05)

    def test_time_derivative_range(self, baseline):
        m, jm, cfg, init, _ = baseline

        with pytest.raises(DomainError, match="delta_steps"):
            estimate_time_derivative(m, jm, init, cfg, delta_steps=10)

    def test_value_growth(self, baseline):
        m, jm, cfg, _, _ = baseline
        measures = [gaussian_cloud(cfg.particles, mean=0.0, seed=s) for s in (1, 2)]
        measures.append(EmpiricalMeasure.point_mass([2.0], cfg.particles))

        constant = value_growth(m, jm, measures, cfg)
        assert 0.0 < constant < 1.0


class TestValueDerivatives:
    """Test value-function derivatives fitted from pinned flows"""

    def setup_method(self):
        """Set up test environment"""
        self.ys = np.linspace(-1.0, 1.0, 5)[:, None]

    def test_fit_with_tangent_flows(self, baseline):
        m, jm, cfg, _, solution = baseline
        P0, Y0 = solution.adjoint.P[0, :, 0], solution.ensemble.states[0, :, 0]
        slope = float(Y0 @ P0 / (Y0 @ Y0))

        vs = fit_value_derivatives(m, jm, solution, self.ys, cfg, copies=2)
        assert vs.V == pytest.approx(solution.report.cost)
        assert vs.gradients == pytest.approx(slope * self.ys, rel=1e-3, abs=1e-6)
        assert vs.hessians[:, 0, 0] == pytest.approx(np.full(5, slope), rel=1e-3)
        assert vs.D_y_dVdnu(np.array([[0.5]])) == pytest.approx([[0.5 * slope]], rel=1e-3)
        assert vs.fit_residual < 1e-6
        assert vs.growth_constant > 0.0
        assert np.array_equal(vs.controls, solution.ensemble.controls[0])

    def test_fit_with_finite_differences(self, baseline):
        _, jm, cfg, init, _ = baseline
        m = affine_model(0.0, 0.0, 1.0, 0.0, h=1.0)
        partial = m.model_copy(update={"drift_coefficient": FirstOrderDrift([[0.0]], [[0.0]], [[1.0]])})
        solution = solve_mftc(partial, jm, init, cfg)

        vs = fit_value_derivatives(partial, jm, solution, self.ys, cfg, copies=2)
        exact = fit_value_derivatives(m, jm, solve_mftc(m, jm, init, cfg), self.ys, cfg, copies=2)
        assert vs.hessians == pytest.approx(exact.hessians, rel=1e-3)

    def test_hjb_pipeline(self, baseline):
        m, jm, cfg, init, solution = baseline

        vs = fit_value_derivatives(m, jm, solution, self.ys, cfg, copies=2)
        report = hjb_residual(m, jm, vs, estimate_time_derivative(m, jm, init, cfg))
        assert report.normalized_residual < 0.2
        assert report.minimizer_match < 0.05


@pytest.mark.slow
class TestJumpFixtureCharacterizations:
    """HJB residual and Q/R characterizations through fitted derivatives on an LQ problem with jumps"""

    def test_fitted_derivatives(self, fixtures_dir):
        run = load_run_config(fixtures_dir / "lq_jump.json")
        m, jm = run.build_model()
        init = run.initial_measure()
        cfg = run.solver
        solution = solve_mftc(m, jm, init, cfg)

        vs = fit_value_derivatives(m, jm, solution, run.probes(init), cfg, run.hjb.copies)
        dVdt = estimate_time_derivative(m, jm, init, cfg, delta_steps=10)
        report = hjb_residual(m, jm, vs, dVdt, cfg.minimizer)
        characterization = q_r_characterization_check(m, jm, solution, vs)

        assert report.normalized_residual <= Config.HJB_RESIDUAL_THRESHOLD
        assert report.minimizer_match <= 0.01
        assert report.terms["compensator"] != 0.0
        assert report.terms["nonlocal"] != 0.0
        assert characterization.q_err <= 0.05
        assert characterization.r_err <= 0.05

        zero = hjb_residual(m, jm, ValueSample.zero(m, cfg.t0, init), 0.0, cfg.minimizer)
        assert zero.normalized_residual >= 10 * Config.HJB_RESIDUAL_THRESHOLD


if __name__ == "__main__":
    pytest.main([__file__])
