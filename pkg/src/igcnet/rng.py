"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(global seed, stream name, index...)``.  Two consumers that ask for the
same key get the same numbers regardless of what else ran before them, so
dropout masks, minibatch orders and simulated noise do not depend on
execution order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return the generator for ``(seed, name, *index)``."""
    entropy = [int(seed) & 0xFFFFFFFF, _name_key(name)] + [int(i) & 0xFFFFFFFF for i in index]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class RngStreams:
    """Seeded family of named streams with per-name draw counters.

    ``next(name)`` hands out the generator for the next counter value of
    ``name``; ``get(name, *index)`` addresses a draw directly.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._counters: dict[str, int] = {}

    def get(self, name: str, *index: int) -> np.random.Generator:
        return stream(self.seed, name, *index)

    def next(self, name: str) -> np.random.Generator:
        i = self._counters.get(name, 0)
        self._counters[name] = i + 1
        return stream(self.seed, name, i)

    def counter(self, name: str) -> int:
        return self._counters.get(name, 0)
