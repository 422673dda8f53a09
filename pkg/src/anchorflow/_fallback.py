"""Pure NumPy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, or when
``ANCHORFLOW_PURE=1`` is set.  Results agree with the compiled kernels to
rounding; each backend on its own is bitwise deterministic.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def splitmix_u64(state: int, n: int) -> tuple[np.ndarray, int]:
    """Return ``n`` splitmix64 outputs and the advanced state."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state) + steps * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    new_state = (state + n * int(_GOLDEN)) & _MASK
    return z, new_state


def uniforms(state: int, n: int) -> tuple[np.ndarray, int]:
    z, new_state = splitmix_u64(state, n)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0), new_state


def normals(state: int, n: int) -> tuple[np.ndarray, int]:
    u, new_state = uniforms(state, 2 * n)
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2), new_state


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, tanh: bool) -> np.ndarray:
    y = x @ w.T + b
    if tanh:
        np.tanh(y, out=y)
    return y


def dense_backward(
    x: np.ndarray, w: np.ndarray, y: np.ndarray, g: np.ndarray, tanh: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of ``y = act(x @ w.T + b)`` given upstream ``g`` on ``y``."""
    if tanh:
        g = g * (1.0 - y * y)
    return g.T @ x, g.sum(axis=0), g @ w
