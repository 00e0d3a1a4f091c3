"""Counter-based 64-bit pseudo-random streams.

Every random draw in the package comes from a :class:`CounterRNG` keyed by
``(seed, tag)``. Output ``i`` of a stream is ``mix64(key + (i + 1) * GAMMA)``
(the SplitMix64 finalizer applied to a Weyl counter), so any draw can be
reproduced from its position alone and streams with different tags are
independent of the order in which they are consumed.

Derived distributions:

* uniform doubles use the top 53 bits: ``(x >> 11) * 2**-53`` in [0, 1)
* bounded integers use ``low + floor(u * (high - low + 1))``
* normals use the cosine branch of Box-Muller on two consecutive uniforms,
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (reference scalar path)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, tag: str) -> int:
    return mix64((seed & MASK64) ^ mix64(fnv1a64(tag)))


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class CounterRNG:
    """Deterministic stream of 64-bit words for one ``(seed, tag)`` pair."""

    def __init__(self, seed: int, tag: str = "") -> None:
        self.seed = int(seed)
        self.tag = tag
        self.key = stream_key(self.seed, tag)
        self.position = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
            return _mix64_array(z)

    def uniform(self, n: int) -> np.ndarray:
        words = self.next_u64(n)
        return (words >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers drawn from the closed range [low, high]."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        span = high - low + 1
        u = self.uniform(n)
        out = low + np.floor(u * span).astype(np.int64)
        return np.minimum(out, high)

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return std * radius * np.cos(2.0 * np.pi * u[:, 1])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(draws[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
