"""Deterministic, counter-based random source.

Reproducibility is a hard requirement here: training runs, poisoned-batch
selection and every Monte-Carlo check must replay bit-identically from a seed,
across processes and platforms, and must survive checkpoint/resume. A stateful
generator object makes resume fragile, so this source is *counter based*: the
i-th raw draw is a pure function of (seed, i). Saving the stream position means
saving one integer.

Raw 64-bit words come from the splitmix64 finalizer applied to
``seed + (counter + i + 1) * GOLDEN`` (all arithmetic mod 2**64). Uniform
doubles take the top 53 bits. Gaussians use the cosine branch of the
Box-Muller transform:

    z = sqrt(-2 ln u1) * cos(2 pi u2),  u1 in (0, 1], u2 in [0, 1)

Each normal consumes exactly two raw draws (the sine branch is discarded so
that the stream position stays a pure counter with no cached spare).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)

# 2**-53, the spacing of the uniform grid on [0, 1)
_INV53 = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorised over uint64 arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class RandomSource:
    """Seeded stream of uniforms, Gaussians, integers and permutations.

    The full state is ``(seed, counter)``; two sources with equal state
    produce identical output forever. ``derive`` builds an independent child
    stream from a string label, so unrelated consumers (data generation,
    training, evaluation) never share or race on one counter.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise DomainError(f"seed must be a u64, got {seed!r}")
        self.seed = int(seed)
        self.counter = int(counter)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = (np.uint64(self.seed) + idx * _GOLDEN) & _U64
            return _mix64(z)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 draws on [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV53
        return u.reshape(shape) if shape != () else float(u[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard-normal float64 draws (Box-Muller cosine branch, 2 raws each)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        raw = self._raw(2 * n)
        # u1 in (0, 1] keeps the log finite; u2 in [0, 1)
        u1 = ((raw[:n] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
        u2 = (raw[n:] >> np.uint64(11)).astype(np.float64) * _INV53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return z.reshape(shape) if shape != () else float(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) via floor(u * range); reproducible by construction."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape if shape != () else (1,))
        out = (np.asarray(u) * (high - low)).astype(np.int64) + low
        return out.reshape(shape) if shape != () else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n), driven by this stream."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform((n - 1,))
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def derive(self, label: str) -> "RandomSource":
        """Independent child stream; deterministic in (seed, label)."""
        mixed = _mix64(np.uint64((self.seed ^ _fnv1a64(label.encode("utf-8"))) & 0xFFFFFFFFFFFFFFFF))
        return RandomSource(int(mixed))

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, counter={self.counter})"
