"""
Tests for the stability monitors
"""

from types import SimpleNamespace

import numpy as np
import pytest

from mfjump.evaluation.monitors import (
    StabilityMetrics,
    energy_constant,
    moment_constant,
    s_norm,
    solution_s_norm,
    stability_metrics,
    time_continuity_constant,
    value_growth_constant,
)


def make_solution(states, P, Q, R, controls, dt, intensities=()):
    ens = SimpleNamespace(
        states=states,
        controls=controls,
        grid=SimpleNamespace(dt=dt),
        noise=SimpleNamespace(intensities=list(intensities)),
    )
    return ens, SimpleNamespace(P=P, Q=Q, R=R)


class TestMonitorConstants:
    """Test the individual constants"""

    def setup_method(self):
        self.steps, self.particles = 4, 3
        self.Y0 = np.array([[1.0], [2.0], [3.0]])

    def test_moment_constant_of_constant_paths(self):
        states = np.repeat(self.Y0[None], self.steps + 1, axis=0)
        second = np.mean(self.Y0**2)

        assert moment_constant(states) == pytest.approx(second / (1.0 + second))

    def test_moment_constant_picks_largest_step(self):
        states = np.repeat(self.Y0[None], self.steps + 1, axis=0)
        states[2] *= 2.0
        second = np.mean(self.Y0**2)

        assert moment_constant(states) == pytest.approx(4.0 * second / (1.0 + second))

    def test_s_norm_of_zero_solution(self):
        K, N = self.steps, self.particles
        value = s_norm(
            np.zeros((K + 1, N, 1)), np.zeros((K + 1, N, 1)), np.zeros((K, N, 1, 1)), np.zeros((K, N, 0, 1)),
            np.zeros((K, N, 1)), 0.1,
        )
        assert value == 0.0

    def test_s_norm_terms(self):
        K, N, dt = self.steps, self.particles, 0.25
        states = np.ones((K + 1, N, 1))
        P = 2.0 * np.ones((K + 1, N, 1))
        Q = np.ones((K, N, 1, 1))
        R = np.ones((K, N, 2, 1))
        controls = np.zeros((K, N, 1))

        # 1 + 4 + (K dt) * 1 + (K dt) * (0.5 + 1.5)
        value = s_norm(states, P, Q, R, controls, dt, intensities=[0.5, 1.5])
        assert value == pytest.approx(np.sqrt(1.0 + 4.0 + 1.0 + 2.0))

    def test_s_norm_ignores_jumps_without_intensities(self):
        K, N = self.steps, self.particles
        R = np.ones((K, N, 1, 1))
        value = s_norm(
            np.zeros((K + 1, N, 1)), np.zeros((K + 1, N, 1)), np.zeros((K, N, 1, 1)), R, np.zeros((K, N, 1)), 0.1
        )
        assert value == 0.0

    def test_time_continuity(self):
        times = np.arange(self.steps + 1, dtype=float) * 0.1
        states = np.broadcast_to(times[:, None, None], (self.steps + 1, self.particles, 1)).copy()

        assert time_continuity_constant(states, 0.1) == pytest.approx(0.1)
        assert time_continuity_constant(states[:1], 0.1) == 0.0

    def test_value_growth(self):
        assert value_growth_constant([1.0, -3.0], [0.0, 1.0]) == pytest.approx(1.5)
        assert value_growth_constant([], []) == 0.0


class TestSolutionMetrics:
    """Test the constants computed from a whole solution"""

    def setup_method(self):
        K, N = 5, 4
        rng = np.random.default_rng(0)
        self.ens, self.adj = make_solution(
            rng.standard_normal((K + 1, N, 1)),
            rng.standard_normal((K + 1, N, 1)),
            rng.standard_normal((K, N, 1, 1)),
            rng.standard_normal((K, N, 1, 1)),
            rng.standard_normal((K, N, 1)),
            0.2,
            intensities=[1.0],
        )

    def test_difference_with_itself(self):
        assert solution_s_norm(self.ens, self.adj, self.ens, self.adj) == 0.0

    def test_energy_constant(self):
        energy = 1.0 + np.mean(self.ens.states[0] ** 2)
        expected = solution_s_norm(self.ens, self.adj) ** 2 / energy

        assert energy_constant(self.ens, self.adj) == pytest.approx(expected)

    def test_stability_metrics(self):
        metrics = stability_metrics(self.ens, self.adj)

        assert isinstance(metrics, StabilityMetrics)
        assert metrics.s_norm == pytest.approx(solution_s_norm(self.ens, self.adj))
        assert metrics.moment_constant == pytest.approx(moment_constant(self.ens.states))
        assert metrics.time_continuity_constant > 0.0


if __name__ == "__main__":
    pytest.main([__file__])
