"""
Tests for counter-based noise generation and the worker pool
"""

import numpy as np
import pytest

from mfjump.models import TimeGrid
from mfjump.noise import NoiseBundle, particle_generator
from mfjump.parallel import chunk_ranges, ordered_map


class TestNoiseBundle:
    """Test NoiseBundle generation"""

    def setup_method(self):
        """Set up test environment"""
        self.grid = TimeGrid(t0=0.0, T=1.0, steps=8)

    def test_shapes(self):
        noise = NoiseBundle.generate(1, 12, self.grid, 2, [0.5, 2.0])

        assert noise.brownian.shape == (8, 12, 2)
        assert noise.counts.shape == (8, 12, 2)
        assert noise.steps == 8
        assert noise.particles == 12
        assert noise.dim == 2
        assert noise.atoms == 2

    def test_independent_of_thread_count(self):
        single = NoiseBundle.generate(4, 50, self.grid, 1, [1.0], threads=1)
        pooled = NoiseBundle.generate(4, 50, self.grid, 1, [1.0], threads=4)

        assert np.array_equal(single.brownian, pooled.brownian)
        assert np.array_equal(single.counts, pooled.counts)

    def test_particle_draws_fixed_by_index(self):
        full = NoiseBundle.generate(9, 10, self.grid, 1, [1.0])
        window = NoiseBundle.generate(9, 3, self.grid, 1, [1.0], first_index=4)

        assert np.array_equal(full.brownian[:, 4:7], window.brownian)
        assert np.array_equal(full.counts[:, 4:7], window.counts)

    def test_streams_differ(self):
        base = NoiseBundle.generate(0, 5, self.grid, 1, stream="base")
        other = NoiseBundle.generate(0, 5, self.grid, 1, stream="pinned")

        assert not np.allclose(base.brownian, other.brownian)

    def test_no_atoms(self):
        noise = NoiseBundle.generate(0, 5, self.grid, 1)

        assert noise.atoms == 0
        assert noise.compensated(0).shape == (5, 0)

    def test_brownian_variance(self):
        noise = NoiseBundle.generate(2, 4000, self.grid, 1)

        assert np.var(noise.brownian) == pytest.approx(self.grid.dt, rel=0.05)

    def test_compensated_counts(self):
        noise = NoiseBundle.generate(0, 6, self.grid, 1, [2.0])

        assert np.allclose(noise.compensated(3), noise.counts[3] - 2.0 * self.grid.dt)

    def test_subset_and_tail(self):
        noise = NoiseBundle.generate(0, 6, self.grid, 1, [2.0])
        subset = noise.subset([1, 3])
        tail = noise.tail(3)

        assert np.array_equal(subset.brownian, noise.brownian[:, [1, 3]])
        assert np.array_equal(tail.brownian, noise.brownian[5:])
        assert tail.steps == 3
        with pytest.raises(ValueError):
            noise.tail(9)

    def test_generator_reproducible(self):
        first = particle_generator(3, "base", 11).standard_normal(4)
        second = particle_generator(3, "base", 11).standard_normal(4)

        assert np.array_equal(first, second)


class TestParallel:
    """Test ordered fan-out helpers"""

    def test_ordered_map_keeps_order(self):
        assert ordered_map(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]

    def test_ordered_map_single_thread(self):
        assert ordered_map(str, [1, 2], threads=1) == ["1", "2"]

    def test_chunk_ranges(self):
        assert chunk_ranges(10, 3) == [(0, 3), (3, 7), (7, 10)]
        assert chunk_ranges(2, 5) == [(0, 1), (1, 2)]
        assert chunk_ranges(0, 3) == []


if __name__ == "__main__":
    pytest.main([__file__])
