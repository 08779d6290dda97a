"""Seeded, counter-based randomness.

Every random draw in the package flows through `Rng`, which wraps numpy's
Philox4x64-10 bit generator keyed directly by (seed, stream). Philox is
counter-based: the stream of bits is a pure function of the key, so
recreating `Rng(seed, stream)` anywhere (another process, another shard,
another platform) and replaying the same draw sequence yields identical
values. This is what lets per-rank upcycling draw router weights that are
bitwise identical to the whole-model path.

Draw order is documented per call site; multi-dimensional draws fill in
row-major (C) order.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Deterministic generator identified by a 64-bit (seed, stream) pair."""

    def __init__(self, seed: int, stream: int = 0):
        if not (0 <= seed < 2**64) or not (0 <= stream < 2**64):
            raise ValueError(f"seed and stream must be u64, got ({seed}, {stream})")
        self.seed = seed
        self.stream = stream
        self._gen = np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))

    def standard_normal(self, shape=None) -> np.ndarray:
        """N(0,1) draws (ziggurat), float64, row-major fill."""
        return self._gen.standard_normal(size=shape)

    def normal(self, shape, std: float) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def random(self, shape=None) -> np.ndarray:
        """Uniform [0, 1) draws, float64."""
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), sorted ascending."""
        return np.sort(self._gen.choice(n, size=k, replace=False))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
