"""
Tests for the backward adjoint solve
"""

import numpy as np
import pytest

from mfjump.adjoint import (
    fubini_pairing,
    mean_field_averages,
    mean_field_driver_pairwise,
    solve_adjoint,
    terminal_condition,
    write_adjoint_csv,
)
from mfjump.control import FeedbackPolicy
from mfjump.exceptions import BlowUp
from mfjump.measure import EmpiricalMeasure
from mfjump.models import TimeGrid
from mfjump.noise import NoiseBundle
from mfjump.problem import JumpMeasure, affine_model
from mfjump.simulator import simulate_forward


def simulate(m, jm, init, grid, seed=0, control=0.0):
    noise = NoiseBundle.generate(seed, init.size, grid, m.dim_state, jm.weights)
    policy = FeedbackPolicy.from_field(np.full((grid.steps, init.size, m.dim_control), control))
    return simulate_forward(m, jm, init, policy, grid, noise)


class TestTerminalCondition:
    """Test P_T"""

    def test_local_terminal_cost(self):
        m = affine_model(0.0, 0.0, 1.0, 0.0, h=2.0)
        states = np.array([[1.0], [-3.0]])

        P, _ = terminal_condition(m, states)
        assert P == pytest.approx(2.0 * states)

    def test_mean_field_terminal_cost(self):
        m = affine_model(0.0, 0.0, 1.0, 0.0, h=0.0, hbar=1.0)
        states = np.array([[1.0], [2.0], [6.0]])

        P, moments = terminal_condition(m, states)
        assert P == pytest.approx(np.full((3, 1), 3.0))
        assert moments == pytest.approx([3.0])


class TestSolveAdjoint:
    """Test the regression-based backward scheme"""

    def setup_method(self):
        """Set up test environment"""
        self.grid = TimeGrid(t0=0.0, T=1.0, steps=10)
        self.jm = JumpMeasure()
        self.init = EmpiricalMeasure.gaussian([0.0], [1.0], 100, seed=1)

    def test_deterministic_linear_adjoint(self):
        m = affine_model(0.0, 0.0, 1.0, 0.0, q=1.0, h=1.0)
        ens = simulate(m, self.jm, self.init, self.grid)
        adj = solve_adjoint(m, self.jm, ens)

        # P_k = (1 + (T - t_k)) Y_k when Y stays put and f_x = x, g_x = x
        assert adj.P[0] == pytest.approx(2.0 * ens.states[0], abs=1e-6)
        assert np.allclose(adj.Q, 0.0, atol=1e-6)
        assert adj.P.shape == (11, 100, 1)
        assert adj.Q.shape == (10, 100, 1, 1)
        assert adj.R.shape == (10, 100, 0, 1)

    def test_martingale_representation(self):
        m = affine_model(0.0, 0.0, 1.0, 1.0, q=1.0, h=1.0)
        init = EmpiricalMeasure.gaussian([0.0], [1.0], 2000, seed=1)
        ens = simulate(m, self.jm, init, self.grid)
        adj = solve_adjoint(m, self.jm, ens)

        # P_T = Y_T with dY = dB, so Q = sigma = 1 at the last step
        assert adj.Q[-1].mean() == pytest.approx(1.0, abs=0.1)

    def test_jump_component(self):
        jm = JumpMeasure([([1.0], 1.0)])
        m = affine_model(0.0, 0.0, 1.0, 0.0, q=1.0, h=1.0, jm=jm, jumps=[(0.5, 0.0, 0.0)])
        init = EmpiricalMeasure.gaussian([0.0], [1.0], 4000, seed=2)
        ens = simulate(m, jm, init, self.grid)
        adj = solve_adjoint(m, jm, ens)

        # a jump of size 0.5 moves P_T = Y_T by 0.5
        assert adj.R[-1, :, 0].mean() == pytest.approx(0.5, abs=0.1)

    def test_factored_driver_matches_double_sum(self):
        jm = JumpMeasure([([1.0], 1.0)])
        m = affine_model(
            0.2, 0.3, 1.0, 0.5, sigma2=0.4, q=1.0, qbar=0.5, h=1.0, hbar=0.5, jm=jm, jumps=[(0.1, 0.2, 0.3)]
        )
        init = EmpiricalMeasure.gaussian([0.5], [1.0], 40, seed=4)
        ens = simulate(m, jm, init, self.grid, control=0.1)
        adj = solve_adjoint(m, jm, ens)

        for k in (0, 5, 9):
            factored = np.einsum("ikb,k->ib", m.features.jacobian(ens.states[k]), adj.mf_moments[k])
            factored = factored + adj.mf_linear[k]
            assert mean_field_driver_pairwise(m, jm, ens, adj, k) == pytest.approx(factored)

    def test_mean_field_averages(self):
        m = affine_model(0.0, 2.0, 1.0, 0.0, q=1.0, qbar=0.0)
        ens = simulate(m, self.jm, self.init, self.grid)
        E = np.ones((100, 1))
        moments, linear = mean_field_averages(
            m, self.jm, 0.0, ens.states[0], ens.cross_sections[0], ens.controls[0], E, np.zeros((100, 1, 1)),
            np.zeros((100, 0, 1)),
        )

        # abar^T mean(E) with no mean-field cost and no control-free sigma2
        assert moments == pytest.approx([2.0])
        assert linear == pytest.approx([0.0])

    def test_fubini_pairing(self):
        m = affine_model(0.2, 0.7, 1.0, 0.3, q=1.0, h=1.0)
        init = EmpiricalMeasure.gaussian([0.0], [1.0], 30, seed=6)
        ens = simulate(m, self.jm, init, self.grid)
        adj = solve_adjoint(m, self.jm, ens)
        delta = np.random.default_rng(3).standard_normal((30, 1))

        lhs, rhs = fubini_pairing(m, ens, adj, 4, delta)
        assert lhs == pytest.approx(rhs)

    def test_blow_up(self):
        m = affine_model(0.0, 0.0, 1.0, 0.0, q=1.0, h=1e6)
        ens = simulate(m, self.jm, EmpiricalMeasure.point_mass([10.0], 20), self.grid)

        with pytest.raises(BlowUp):
            solve_adjoint(m, self.jm, ens, cap=1e3)

    def test_write_csv(self, tmp_path):
        jm = JumpMeasure([([1.0], 1.0)])
        m = affine_model(0.0, 0.0, 1.0, 0.2, q=1.0, h=1.0, jm=jm, jumps=[(0.5, 0.0, 0.0)])
        ens = simulate(m, jm, self.init, self.grid)
        adj = solve_adjoint(m, jm, ens)
        path = write_adjoint_csv(ens, adj, tmp_path / "adjoint.csv")

        table = np.genfromtxt(path, delimiter=",", names=True)
        assert table.dtype.names == ("step", "time", "particle", "P_1", "Q_1_1", "R_1_1")
        assert len(table) == 11 * 100


if __name__ == "__main__":
    pytest.main([__file__])
