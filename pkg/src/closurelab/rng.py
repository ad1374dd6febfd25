"""Counter-based random streams.

Every draw is addressed by ``(seed, stream, member, step)``: the Philox key
carries seed, stream and member, and the counter carries the step. Results do
not depend on the order in which members or steps are evaluated.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(*parts: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(int(p & _MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def generator(seed: int, stream: int = 0, member: int = 0, step: int = 0) -> np.random.Generator:
    key = np.array([_mix(seed, stream), member & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, step & _MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def standard_normal(shape, seed: int, stream: int = 0, member: int = 0, step: int = 0) -> np.ndarray:
    return generator(seed, stream, member, step).standard_normal(shape)


def child_seed(seed: int, *labels: int) -> int:
    """Derive an independent integer seed from a parent seed and labels."""
    return _mix(seed, *labels) >> 1
