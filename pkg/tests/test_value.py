"""
Tests for costs, value-function derivatives and the mean-field Ito check
"""

import numpy as np
import pytest

from mfjump.control import FeedbackPolicy
from mfjump.costs import evaluate_cost, particle_costs, running_costs, terminal_value
from mfjump.exceptions import DomainError, OperationUnsupported, SufficiencyViolation
from mfjump.measure import EmpiricalMeasure
from mfjump.models import AssumptionConstants, TimeGrid
from mfjump.noise import NoiseBundle
from mfjump.problem import JumpMeasure, affine_model
from mfjump.simulator import simulate_forward
from mfjump.value import (
    ANCHOR_CONVENTION,
    MeasureFunctional,
    MomentFunctional,
    ValueSample,
    gap_coefficient,
    hjb_residual,
    ito_check,
    q_r_characterization_check,
    time_derivative_formula,
)

SIGMA = 0.5
GAMMA = 0.3


def riccati_sample(m, mu, jm, probes=None):
    """V = p E[x^2]/2 + kappa at t = 0 for x' = v + noise, f = (x^2 + v^2)/2, g = 0, T = 1.

    Here p = tanh(1) and the solver control is the exact feedback -p x.
    """
    p = np.tanh(1.0)
    probes = np.empty((0, 1)) if probes is None else probes
    jump = np.array([[[p * GAMMA]] for _ in range(len(probes))]).reshape(len(probes), jm.size, 1)
    return ValueSample(
        t=0.0,
        mu=mu,
        V=0.5 * p * float(np.mean(mu.points**2)),
        probes=probes,
        gradients=p * probes,
        hessians=np.full((len(probes), 1, 1), p),
        probe_Q=np.full((len(probes), 1, 1), p * SIGMA),
        probe_R=jump,
        controls=-p * mu.points,
        D_y_dVdnu=lambda y: p * np.atleast_2d(y),
        D_y2_dVdnu=lambda y: np.full((len(np.atleast_2d(y)), 1, 1), p),
    )


def riccati_time_derivative(mu, jm) -> float:
    """p' E[x^2]/2 + kappa' with p' = p^2 - 1 and kappa' = -p (sigma^2 + sum lambda gamma^2)/2"""
    p = np.tanh(1.0)
    jump_variance = sum(weight * GAMMA**2 for weight in jm.weights)
    return 0.5 * (p**2 - 1.0) * float(np.mean(mu.points**2)) - 0.5 * p * (SIGMA**2 + jump_variance)


class TestCosts:
    """Test cost evaluation along an ensemble"""

    def setup_method(self):
        """Set up test environment"""
        self.grid = TimeGrid(t0=0.0, T=1.0, steps=4)
        self.m = affine_model(0.0, 0.0, 1.0, 0.0, q=2.0, r=1.0, h=1.0, hbar=1.0)
        self.init = EmpiricalMeasure([[1.0], [3.0]])
        noise = NoiseBundle.generate(0, 2, self.grid, 1)
        policy = FeedbackPolicy.explicit(lambda k, t, X, cross: np.ones_like(X))
        self.ens = simulate_forward(self.m, JumpMeasure(), self.init, policy, self.grid, noise)

    def test_running_costs(self):
        states = self.ens.states[:4, :, 0]
        expected = 0.25 * np.sum(states**2 + 0.5, axis=0)
        assert running_costs(self.m, self.ens) == pytest.approx(expected)
        assert running_costs(self.m, self.ens, stop=1) == pytest.approx(0.25 * (states[0] ** 2 + 0.5))

    def test_particle_and_mean_costs(self):
        final = self.ens.states[-1, :, 0]
        terminal = 0.5 * final**2 + 0.5 * final.mean() ** 2
        costs = particle_costs(self.m, self.ens)

        assert costs == pytest.approx(running_costs(self.m, self.ens) + terminal)
        assert evaluate_cost(self.m, self.ens) == pytest.approx(costs.mean())

    def test_terminal_value(self):
        # (x^2 + mean^2)/2 averaged: (1 + 9)/4 + 4/2
        assert terminal_value(self.m, self.init) == pytest.approx(4.5)


class TestGapCoefficient:
    """Test the quadratic gap coefficient"""

    def test_without_cross_term(self):
        c = AssumptionConstants(L=2.0, L2=0.5, lambda0=1.0, lambda_v=3.0, lambda_x=1.0)
        assert gap_coefficient(c) == pytest.approx(2.0)

    def test_with_cross_term(self):
        c = AssumptionConstants(L=1.0, L1=1.0, lambda0=1.0, lambda_v=2.0, lambda_x=1.0)
        assert gap_coefficient(c) == pytest.approx(1.0)

    def test_undefined_denominator(self):
        c = AssumptionConstants(L=2.0, L0=10.0, L1=1.0, lambda0=1.0, lambda_v=2.0, lambda_x=1.0)
        with pytest.raises(SufficiencyViolation, match="denominator"):
            gap_coefficient(c)


class TestValueSample:
    """Test the value-function sample and its line integral"""

    def test_dvdnu_anchor(self):
        m = affine_model(0.0, 0.0, 1.0, 0.0)
        vs = ValueSample.zero(m, 0.0, EmpiricalMeasure.point_mass([1.0], 4))
        vs.D_y_dVdnu = lambda y: np.atleast_2d(y)

        assert vs.anchor == pytest.approx([1.0])
        assert vs.dVdnu(np.array([[3.0], [1.0], [-1.0]])) == pytest.approx([4.0, 0.0, 0.0])
        assert vs.anchor_convention == ANCHOR_CONVENTION

    def test_zero_value(self):
        m = affine_model(0.0, 0.0, 1.0, SIGMA, h=0.0)
        mu = EmpiricalMeasure.gaussian([0.5], [1.0], 500, seed=0)
        vs = ValueSample.zero(m, 0.0, mu)

        report = hjb_residual(m, JumpMeasure(), vs, 0.0)
        assert report.residual == pytest.approx(0.5 * float(np.mean(mu.points**2)))
        assert report.normalized_residual == pytest.approx(1.0)


class TestHJB:
    """Test the HJB residual on an exact Riccati value function"""

    def setup_method(self):
        """Set up test environment"""
        self.mu = EmpiricalMeasure.gaussian([0.3], [1.0], 400, seed=1)

    def test_exact_value_without_jumps(self):
        jm = JumpMeasure()
        m = affine_model(0.0, 0.0, 1.0, SIGMA, q=1.0, h=0.0)
        vs = riccati_sample(m, self.mu, jm)
        dVdt = riccati_time_derivative(self.mu, jm)

        report = hjb_residual(m, jm, vs, dVdt)
        assert report.residual == pytest.approx(0.0, abs=1e-8)
        assert report.normalized_residual < 1e-8
        assert report.minimizer_match == pytest.approx(0.0, abs=1e-8)
        assert set(report.terms) == {"diffusion", "drift", "compensator", "running", "nonlocal", "dVdt"}
        assert time_derivative_formula(m, jm, vs) == pytest.approx(dVdt)

    def test_exact_value_with_jumps(self):
        jm = JumpMeasure([([1.0], 2.0)])
        m = affine_model(0.0, 0.0, 1.0, SIGMA, q=1.0, h=0.0, jm=jm, jumps=[(GAMMA, 0.0, 0.0)])
        vs = riccati_sample(m, self.mu, jm)
        dVdt = riccati_time_derivative(self.mu, jm)

        report = hjb_residual(m, jm, vs, dVdt)
        assert report.residual == pytest.approx(0.0, abs=1e-8)
        assert report.terms["nonlocal"] != 0.0
        assert time_derivative_formula(m, jm, vs) == pytest.approx(dVdt)

    def test_controlled_noise_unsupported(self):
        m = affine_model(0.0, 0.0, 1.0, SIGMA, noise_loading=1.0)
        vs = ValueSample.zero(m, 0.0, self.mu)

        with pytest.raises(OperationUnsupported):
            hjb_residual(m, JumpMeasure(), vs, 0.0)

    def test_q_r_characterization(self):
        jm = JumpMeasure([([1.0], 2.0)])
        m = affine_model(0.0, 0.0, 1.0, SIGMA, q=1.0, h=0.0, jm=jm, jumps=[(GAMMA, 0.0, 0.0)])
        probes = np.linspace(-1.0, 1.0, 5)[:, None]
        vs = riccati_sample(m, self.mu, jm, probes)
        base = (type("Ensemble", (), {"cross_sections": [m.cross_section(self.mu.points)]})(),)

        report = q_r_characterization_check(m, jm, base, vs)
        assert report.q_err == pytest.approx(0.0, abs=1e-12)
        assert report.r_err == pytest.approx(0.0, abs=1e-12)

        vs.probe_Q = np.zeros_like(vs.probe_Q)
        assert q_r_characterization_check(m, jm, base, vs).q_err == pytest.approx(1.0)


class TestItoCheck:
    """Test the mean-field Ito formula along simulated ensembles"""

    def simulate(self, m, particles, policy, jm=None, steps=10):
        jm = jm or JumpMeasure()
        grid = TimeGrid(t0=0.0, T=1.0, steps=steps)
        init = EmpiricalMeasure.gaussian([0.5], [0.5], particles, seed=2)
        noise = NoiseBundle.generate(4, particles, grid, 1, jm.weights)
        return simulate_forward(m, jm, init, policy, grid, noise)

    def test_moment_functional(self):
        y = np.array([[1.0, 2.0], [3.0, -1.0]])
        first, second = MomentFunctional.first(1), MomentFunctional.second()

        assert first.value(0.0, y) == pytest.approx(0.5)
        assert second.value(0.0, y) == pytest.approx(7.5)
        assert first.gradient(0.0, y, y).tolist() == [[0.0, 1.0], [0.0, 1.0]]
        assert second.gradient(0.0, y, y) == pytest.approx(2.0 * y)
        assert second.hessian(0.0, y, y)[1] == pytest.approx(2.0 * np.eye(2))
        assert np.all(first.hessian(0.0, y, y) == 0.0)

    def test_unsupported_order(self):
        with pytest.raises(DomainError, match="order"):
            MomentFunctional(3)

    def test_functional_must_define_derivatives(self):
        class ValueOnly(MeasureFunctional):
            def value(self, t, points):
                return 0.0

        with pytest.raises(TypeError):
            MeasureFunctional()
        with pytest.raises(TypeError, match="hessian"):
            ValueOnly()

    def test_deterministic_first_moment(self):
        m = affine_model(0.0, 0.5, 1.0, 0.0)
        ens = self.simulate(m, 50, FeedbackPolicy.explicit(lambda k, t, X, cross: -X))

        report = ito_check(MomentFunctional.first(), m, JumpMeasure(), ens)
        assert report.residual == pytest.approx(0.0, abs=1e-12)
        assert report.rate_residual == pytest.approx(0.0, abs=1e-10)
        assert len(report.per_knot) == 10

    def test_second_moment_with_noise(self):
        m = affine_model(0.0, 0.0, 1.0, 1.0)
        ens = self.simulate(m, 5000, FeedbackPolicy.explicit(lambda k, t, X, cross: np.zeros_like(X)))

        # E|X_t|^2 grows at rate sigma^2 = 1
        report = ito_check(MomentFunctional.second(), m, JumpMeasure(), ens)
        assert report.residual < 0.3

    def test_jumps_enter_second_moment(self):
        jm = JumpMeasure([([1.0], 3.0)])
        m = affine_model(0.0, 0.0, 1.0, 0.0, jm=jm, jumps=[(0.5, 0.0, 0.0)])
        ens = self.simulate(m, 5000, FeedbackPolicy.explicit(lambda k, t, X, cross: np.zeros_like(X)), jm=jm)

        # compensated jumps of size 0.5 at rate 3 add 0.75 per unit time
        report = ito_check(MomentFunctional.second(), m, jm, ens)
        assert report.residual < 0.3


if __name__ == "__main__":
    pytest.main([__file__])
