"""Seeded random streams built on numpy's Philox counter-based generator.

Philox output is specified bit-for-bit, so a seed yields the same stream on
every platform.  Independent sub-streams are derived by hashing the parent
seed together with a string tag through :class:`numpy.random.SeedSequence`.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "philox4x64"


class Rng:
    def __init__(self, seed: int, *tags: str | int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.tags = tags
        entropy = [self.seed] + [_tag_word(t) for t in tags]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *tags: str | int) -> "Rng":
        return Rng(self.seed, *self.tags, *tags)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, lo, hi, size=None) -> np.ndarray:
        return self._gen.uniform(lo, hi, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, lo, hi=None, size=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def _tag_word(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag & (2**64 - 1)
    return zlib.crc32(tag.encode("utf-8"))
