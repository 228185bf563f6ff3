"""Deterministic counter-based random number generation.

Every random draw in this package comes from a SplitMix64-style stream:
the i-th raw word is ``mix64(key + (i + 1) * GOLDEN)`` where ``mix64`` is
the SplitMix64 finalizer. Because each word depends only on (key, index),
the stream can be split into independent child streams by deriving a new
key from a label, and parallel consumers can never perturb each other.

Constants (all fixed, never change them or every artifact hash changes):
    GOLDEN = 0x9E3779B97F4A7C15   increment (2^64 / golden ratio)
    MIX1   = 0xBF58476D1CE4E5B9   first finalizer multiplier
    MIX2   = 0x94D049BB133111EB   second finalizer multiplier

Child keys: ``child = mix64(key ^ mix64(fnv1a64(label)))`` with the label
rendered through ``str()`` and encoded as UTF-8.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U64_INV = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wraps modulo 2^64)."""
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a64(data: bytes) -> np.uint64:
    h = _FNV_OFFSET
    for b in data:
        h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


class Rng:
    """Splittable counter-based generator.

    Identical (seed, call sequence) gives bit-identical output on every
    platform; splitting by label yields streams that stay identical no
    matter how sibling streams are consumed.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def split(self, label) -> "Rng":
        """Derive an independent child stream keyed by ``label``."""
        h = _fnv1a64(str(label).encode("utf-8"))
        child = Rng(0)
        child.seed = _mix64(np.array([self.seed ^ _mix64(np.array([h]))[0]], dtype=np.uint64))[0]
        return child

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + int(n), dtype=np.uint64)
        self._counter += int(n)
        return _mix64(self.seed + (idx + np.uint64(1)) * GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform floats in [0, 1) with 53-bit resolution."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _U64_INV
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 in (0, 1] so log() is finite
        u1 = ((self.u64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * _U64_INV
        u2 = (self.u64(m) >> np.uint64(11)).astype(np.float64) * _U64_INV
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by scaling uniforms (deterministic)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape if shape else (1,))
        out = (np.asarray(u) * (high - low)).astype(np.int64) + low
        return out if shape else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n) via key sort."""
        return np.argsort(self.uniform(n), kind="stable")

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return np.asarray(self.uniform(shape if shape else (1,))) < p
