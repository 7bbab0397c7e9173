"""Counter-based random streams.

A stream is the triple ``(seed, stream_id, counter)``. Every draw call builds a
Philox generator keyed by ``(seed, stream_id)`` and positioned at ``counter``
in a high word of the Philox counter, then bumps ``counter``. Draws are thus a
pure function of the stream fields and never depend on call order elsewhere.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1


def _mix(*words: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    for w in words:
        h.update(struct.pack("<Q", w & _MASK))
    return struct.unpack("<Q", h.digest())[0]


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed &= _MASK
        self.stream_id &= _MASK
        self.counter &= _MASK

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        ctr = np.array([0, 0, self.counter, 0], dtype=np.uint64)
        self.counter = (self.counter + 1) & _MASK
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def normal(self, size=None) -> np.ndarray:
        return self._generator().standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._generator().random(size)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self._generator().integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def split(self, tag: int) -> "RngStream":
        return rng_split(self, tag)

    def state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(int(state["seed"]), int(state["stream_id"]), int(state["counter"]))


def rng_split(parent: RngStream, tag: int) -> RngStream:
    """Child stream determined by ``(parent.seed, parent.stream_id, tag)`` only."""
    return RngStream(parent.seed, _mix(parent.stream_id, tag, 0x5F0_1AB), 0)


def tag_of(name: str) -> int:
    """Stable 64-bit tag for a string label."""
    return struct.unpack("<Q", hashlib.blake2b(name.encode(), digest_size=8).digest())[0]
