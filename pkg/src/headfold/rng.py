"""Counter-based, splittable random streams.

A stream is identified by ``(seed, stream_id)``; both are folded into the
128-bit Philox key, so a stream's draws never depend on how many other
streams exist or in what order parallel workers consume them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = ((self.stream & _MASK64) << 64) | (self.seed & _MASK64)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(key=key)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def split(self, stream: int) -> "RngStream":
        """Fresh stream with the same seed and a different id."""
        return RngStream(self.seed, stream)

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size)

    def normal(self, size, std: float = 1.0):
        return self._gen.normal(0.0, std, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, k: int):
        return self._gen.choice(n, size=k, replace=False)


# stream ids used across the package so distinct purposes never collide
STREAM_INIT = 1
STREAM_TRAIN_DATA = 2
STREAM_VALID_DATA = 3
STREAM_PROFILE = 4
