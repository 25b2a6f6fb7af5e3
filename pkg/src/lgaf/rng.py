"""Counter-based random streams.

Every stream is numpy's Philox4x64-10 bit generator keyed by
``(seed, blake2b(name))`` and started at a 256-bit counter whose low word is
``counter``. Philox output depends only on (key, counter), so a stream is
reproducible across platforms, and named substreams are statistically
independent of their parent without sharing state.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_word(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


class RngStream:
    """A reproducible random stream identified by ``(seed, name, counter)``."""

    def __init__(self, seed: int, counter: int = 0, name: str = ""):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64
        self.name = name
        key = np.array([self.seed, _name_word(name)], dtype=np.uint64)
        ctr = np.array([self.counter, 0, 0, 0], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def substream(self, name: str) -> "RngStream":
        full = f"{self.name}/{name}" if self.name else name
        return RngStream(self.seed, 0, full)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter}, name={self.name!r})"
