"""Counter-based SplitMix64 random streams.

Every random draw in the package comes from a :class:`Stream`, which is a
pair ``(key, counter)`` of unsigned 64-bit integers.  The i-th raw output
of a stream is the SplitMix64 finalizer applied to ``key + (counter+i+1)*G``
(all arithmetic mod 2**64)::

    G  = 0x9E3779B97F4A7C15
    z  = key + n * G
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Derived quantities:

* uniform double in [0, 1): ``(out >> 11) * 2**-53``
* standard normal: Box-Muller on two consecutive uniforms ``u1, u2``,
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` (one normal per pair)
* integer in [0, n): ``floor(uniform * n)``
* permutation: Fisher-Yates from the last index down, one integer per swap

Child streams are keyed by ``mix(key ^ mix(hash(label)))`` where integer
labels are used as-is and string labels are hashed with FNV-1a 64.  Because
the output depends only on ``(key, n)``, generation is vectorized with numpy
and the full state needed to resume is two integers.
"""
from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK = (1 << 64) - 1

_G = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK
    return h


def _label_hash(label: int | str) -> int:
    if isinstance(label, str):
        return fnv1a64(label)
    return int(label) & MASK


class Stream:
    """A reproducible random stream; see the module docstring for the algorithm."""

    __slots__ = ("key", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.key = mix64(int(seed) & MASK)
        self.counter = int(counter)

    @classmethod
    def from_state(cls, key: int, counter: int) -> "Stream":
        s = cls.__new__(cls)
        s.key = int(key) & MASK
        s.counter = int(counter)
        return s

    def state(self) -> tuple[int, int]:
        return self.key, self.counter

    def child(self, *labels: int | str) -> "Stream":
        key = self.key
        for label in labels:
            key = mix64(key ^ mix64(_label_hash(label)))
        return Stream.from_state(key, 0)

    def raw(self, n: int) -> np.ndarray:
        n = int(n)
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * _G
            return _mix_array(z)

    def uniform(self, shape=()) -> np.ndarray | float:
        n = int(np.prod(shape)) if shape != () else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return float(u[0]) if shape == () else u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray | float:
        n = int(np.prod(shape)) if shape != () else 1
        u = (self.raw(2 * n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return float(z[0]) if shape == () else z.reshape(shape)

    def integers(self, n: int, shape=()) -> np.ndarray | int:
        """Uniform integers in ``[0, n)``."""
        if n < 1:
            raise ValueError("integers() needs n >= 1")
        u = self.uniform(shape if shape != () else (1,))
        out = np.minimum(np.floor(u * n).astype(np.int64), n - 1)
        return int(out[0]) if shape == () else out

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform((n - 1,))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct integers from ``[0, n)`` (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot choose {k} distinct values from {n}")
        pool = np.arange(n, dtype=np.int64)
        u = self.uniform((k,)) if k else np.empty(0)
        for i in range(k):
            j = i + min(int(u[i] * (n - i)), n - i - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
