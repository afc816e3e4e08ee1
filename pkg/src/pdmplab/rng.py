"""Reproducible per-replica random streams.

Every replica gets its own counter-based generator keyed by a 64-bit mix of
``(base_seed, stream_id)``, so replicas can be evaluated in any order (or in
parallel) without changing their output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def mix64(*words: int) -> int:
    """Fold integers into one 64-bit value with the splitmix64 finalizer."""
    h = 0x9E3779B97F4A7C15
    for w in words:
        z = (h ^ (int(w) & _MASK64)) & _MASK64
        z = (z + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        h = z ^ (z >> 31)
    return h


@dataclass(frozen=True)
class RngStream:
    base_seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= int(self.base_seed) <= _MASK64:
            raise ValueError("base_seed must fit in an unsigned 64-bit integer")
        if int(self.stream_id) < 0:
            raise ValueError("stream_id must be non-negative")

    @property
    def key(self) -> int:
        return mix64(self.base_seed, self.stream_id)

    def generator(self) -> np.random.Generator:
        """A fresh generator; calling twice gives two identical generators."""
        return np.random.Generator(np.random.Philox(key=self.key))

    def substream(self, i: int) -> "RngStream":
        """Child stream ``i`` (used for replicas or for separating concerns)."""
        return RngStream(self.key, int(i))

    def substreams(self, n: int) -> list["RngStream"]:
        return [self.substream(i) for i in range(n)]


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    if isinstance(rng, np.random.Generator):
        # derive a stream deterministically from the generator state
        return RngStream(int(rng.integers(0, 2**63)))
    raise TypeError(f"cannot build a random stream from {type(rng).__name__}")
