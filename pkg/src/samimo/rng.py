"""Seeded, stream-partitioned random sources."""

from __future__ import annotations

import numpy as np
import torch


class RandomSource:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams are derived with :class:`numpy.random.SeedSequence` so distinct
    ``stream_id`` values give statistically independent sequences, and the
    PCG64 bit generator makes them identical across platforms.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        key = (stream_id,) if isinstance(stream_id, (int, np.integer)) else tuple(stream_id)
        if any(k < 0 for k in key):
            raise ValueError("stream_id entries must be nonnegative")
        self.stream_id = tuple(int(k) for k in key)
        self._ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.gen = np.random.Generator(np.random.PCG64(self._ss))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, *key: int) -> "RandomSource":
        """Independent sub-stream, e.g. ``rng.child(trial_index)``."""
        return RandomSource(self.seed, self.stream_id + tuple(int(k) for k in key))

    def integer_seed(self) -> int:
        """A 63-bit integer derived from the stream state (for torch seeding)."""
        return int(self._ss.generate_state(1, dtype=np.uint64)[0]) & (2**63 - 1)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.integer_seed())
        return g

    def complex_normal(self, size, var: float = 1.0) -> np.ndarray:
        """i.i.d. CN(0, var): variance ``var/2`` per real component."""
        s = np.sqrt(var / 2.0)
        re = self.gen.standard_normal(size)
        im = self.gen.standard_normal(size)
        return s * (re + 1j * im)
