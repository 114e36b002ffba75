"""Counter-based random number streams.

Every Monte Carlo replica owns one stream, keyed by (seed, stream_index)
through the Philox counter-based generator, so replicas are reproducible and
independent without any shared state.  The same Generator object can be
consumed from pure Python and from numba kernels; both produce identical
draw sequences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def make_stream(seed: int, stream_index: int = 0) -> np.random.Generator:
    """Return the Generator for replica `stream_index` of experiment `seed`."""
    key = np.array([seed & _MASK64, stream_index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class RngKey:
    """Identity of one replica stream: (seed, stream_index)."""

    seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        return make_stream(self.seed, self.stream_index)

    def with_stream(self, stream_index: int) -> "RngKey":
        return RngKey(self.seed, stream_index)
