"""Seeded, splittable random streams.

Backed by numpy's Philox counter-based generator. A stream is identified by a
64-bit root seed plus a path of string labels, so ``root.split("env", 3)``
always yields the same child stream no matter how much the parent has been
consumed.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed & _MASK64}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def default_seed(fallback: int = 0) -> int:
    """Root seed from the DHAL_SEED environment variable, if set."""
    value = os.environ.get("DHAL_SEED")
    return int(value) if value not in (None, "") else fallback


class RngStream:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, *labels) -> "RngStream":
        key = self.seed
        for label in labels:
            key = _mix(key, str(label))
        return RngStream(key)

    # thin wrappers so call sites stay short
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def beta(self, a, b, size=None):
        return self.gen.beta(a, b, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def raw(self, n: int) -> np.ndarray:
        """Raw 64-bit generator output."""
        return self.gen.bit_generator.random_raw(n)
