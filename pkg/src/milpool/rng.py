"""Seeded, splittable random streams.

Every source of randomness in the package (weight init, shuffling, dropout,
bag subsampling, data generation) draws from an :class:`RngStream`. Child
streams are derived from the parent seed plus an index path, so a fold or an
epoch gets the same numbers no matter how many other streams were consumed
before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "philox4x64-seedsequence"


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: tuple[int, ...] = field(default=())
    algorithm: str = ALGORITHM

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.path + (int(index),))

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot make a random generator from {type(rng).__name__}")
