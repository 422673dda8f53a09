"""Seedable splitmix64 generator with Box-Muller normals.

No global state: every consumer owns an :class:`Rng`.  Independent streams
come from :meth:`Rng.split` / :func:`derive`, which hash the parent seed with
a stream id.
"""
from __future__ import annotations

import math

import numpy as np

from . import _backend

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

# process-wide count of normal draws, for the noiseless-eval assertion
_drawn = 0


def normals_drawn() -> int:
    return _drawn


def mix64(z: int) -> int:
    """splitmix64 finalizer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def box_muller(u1: float, u2: float) -> float:
    """Standard normal from two uniforms, ``u1`` in (0, 1]."""
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


class Rng:
    """splitmix64 stream.  Single consumer; use :meth:`split` to fan out."""

    __slots__ = ("seed", "state", "draws")

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.state = self.seed
        # count of normal draws, used to assert that eval paths stay noiseless
        self.draws = 0

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        """Uniform on [0, 1) with 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniforms(self, n: int) -> np.ndarray:
        out, self.state = _backend.kernels.uniforms(self.state, int(n))
        return out

    def gaussian(self) -> float:
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        self._count(1)
        return box_muller(u1, u2)

    def normal(self, shape) -> np.ndarray:
        """Array of standard normals; consumes two uniforms per entry."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        out, self.state = _backend.kernels.normals(self.state, n)
        self._count(n)
        return out.reshape(shape)

    def _count(self, n: int) -> None:
        global _drawn
        self.draws += n
        _drawn += n

    def integers(self, low: int, high: int) -> int:
        """Uniform integer on [low, high)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        return low + int(self.uniform() * (high - low))

    def split(self, *stream: int) -> "Rng":
        return derive(self.seed, *stream)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed:#x}, state={self.state:#x})"


def derive(seed: int, *stream: int) -> Rng:
    """Child generator keyed by ``(seed, stream...)``; order matters."""
    s = mix64(int(seed) & MASK64)
    for k in stream:
        s = mix64(s ^ mix64((int(k) + 1) * GOLDEN))
    return Rng(s)
