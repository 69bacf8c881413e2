"""
Counter-based noise: Brownian increments and Poisson jump counts per particle
"""

import logging
import zlib
from typing import Optional, Sequence

import numpy as np

from .models import TimeGrid
from .parallel import chunk_ranges, ordered_map

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


def particle_generator(seed: int, stream: str, index: int) -> np.random.Generator:
    """Philox generator for one particle.

    The key packs (stream, seed) and the particle index sits in the high word
    of the counter, so every particle's draws are fixed by (seed, stream, index)
    alone and do not depend on how particles are split across workers.
    """
    key = (zlib.crc32(stream.encode("utf-8")) << 64) | (int(seed) & _SEED_MASK)
    counter = np.array([0, 0, 0, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


class NoiseBundle:
    """Per-particle, per-step Brownian increments and jump counts.

    Attributes:
        brownian: steps x N x n increments with variance dt
        counts: steps x N x A Poisson counts with mean lambda_a dt
        intensities: atom weights lambda_a
    """

    def __init__(
        self,
        seed: int,
        stream: str,
        dt: float,
        brownian: np.ndarray,
        counts: np.ndarray,
        intensities: np.ndarray,
    ):
        self.seed = seed
        self.stream = stream
        self.dt = dt
        self.brownian = brownian
        self.counts = counts
        self.intensities = np.asarray(intensities, dtype=float)

    @classmethod
    def generate(
        cls,
        seed: int,
        particles: int,
        grid: TimeGrid,
        dim: int,
        intensities: Sequence[float] = (),
        stream: str = "base",
        first_index: int = 0,
        threads: Optional[int] = None,
    ) -> "NoiseBundle":
        """Draw the noise of particles first_index, ..., first_index + particles - 1"""
        rates = np.asarray(intensities, dtype=float)
        steps, dt = grid.steps, grid.dt
        atoms = rates.size

        def draw(bounds):
            start, stop = bounds
            dB = np.empty((steps, stop - start, dim))
            dN = np.empty((steps, stop - start, atoms), dtype=np.int64)
            for offset, index in enumerate(range(first_index + start, first_index + stop)):
                rng = particle_generator(seed, stream, index)
                dB[:, offset, :] = rng.standard_normal((steps, dim)) * np.sqrt(dt)
                dN[:, offset, :] = rng.poisson(rates * dt, size=(steps, atoms))
            return dB, dN

        pieces = ordered_map(draw, chunk_ranges(particles, 4 * max(1, particles // 2500)), threads)
        brownian = np.concatenate([p[0] for p in pieces], axis=1)
        counts = np.concatenate([p[1] for p in pieces], axis=1)
        logger.debug(f"Generated {stream} noise: {particles} particles, {steps} steps, {atoms} atoms")
        return cls(seed, stream, dt, brownian, counts, rates)

    @property
    def steps(self) -> int:
        return self.brownian.shape[0]

    @property
    def particles(self) -> int:
        return self.brownian.shape[1]

    @property
    def dim(self) -> int:
        return self.brownian.shape[2]

    @property
    def atoms(self) -> int:
        return self.counts.shape[2]

    def compensated(self, k: int) -> np.ndarray:
        """N x A compensated counts dN - lambda dt at step k"""
        return self.counts[k] - self.intensities * self.dt

    def subset(self, indices) -> "NoiseBundle":
        indices = np.asarray(indices)
        return NoiseBundle(
            self.seed, self.stream, self.dt, self.brownian[:, indices], self.counts[:, indices], self.intensities
        )

    def tail(self, steps: int) -> "NoiseBundle":
        """The last steps steps, aligned with the terminal time"""
        if not 1 <= steps <= self.steps:
            raise ValueError(f"steps must lie in [1, {self.steps}], got {steps}")
        return NoiseBundle(
            self.seed,
            self.stream,
            self.dt,
            self.brownian[self.steps - steps :],
            self.counts[self.steps - steps :],
            self.intensities,
        )
