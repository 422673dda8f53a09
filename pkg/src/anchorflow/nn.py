"""Small tanh MLP with hand-written backward pass, Adam, and checkpoints.

Weights are stored ``(rows=out, cols=in)``; a batch of inputs has shape
``(n, in)``.  Every hidden layer applies tanh, the last layer is linear.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .errors import DimensionError, DivergenceError, MissingArtifactError
from .rng import Rng

MAGIC = b"AFLW"
VERSION_MLP = 1
VERSION_FLOW = 2


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class MlpParams:
    layers: list[Layer]
    activation: str = "tanh"

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            w, b = layer.weight, layer.bias
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.layers[i - 1].weight.shape[0]}"
                )

    @classmethod
    def init(cls, sizes: list[int], rng: Rng, final_scale: float = 1.0) -> "MlpParams":
        """Gaussian init scaled by 1/sqrt(fan_in), zero biases."""
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = 1.0 / np.sqrt(fan_in)
            if k == len(sizes) - 2:
                scale *= final_scale
            w = rng.normal((fan_out, fan_in)) * scale
            layers.append(Layer(np.ascontiguousarray(w), np.zeros(fan_out)))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes: list[int]) -> "MlpParams":
        return cls([Layer(np.zeros((o, i)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.weight.shape[0] for layer in self.layers]

    @property
    def n_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.r_[l.weight.ravel(), l.bias] for l in self.layers])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise DimensionError(f"flat vector has shape {vec.shape}, need ({self.n_params},)")
        layers, off = [], 0
        for l in self.layers:
            r, c = l.weight.shape
            w = vec[off : off + r * c].reshape(r, c).copy()
            off += r * c
            b = vec[off : off + r].copy()
            off += r
            layers.append(Layer(w, b))
        return MlpParams(layers, self.activation)

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy()) for l in self.layers], self.activation)

    def is_finite(self) -> bool:
        return all(np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in self.layers)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"input shape {x.shape[-1:]} does not match first layer ({params.in_dim})")
    return np.ascontiguousarray(x), single


def forward_cache(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Forward pass on a batch returning ``[x, h1, ..., y]``."""
    k = _backend.kernels
    acts = [x]
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        acts.append(k.dense_forward(acts[-1], layer.weight, layer.bias, i < last))
    return acts


def backward_cache(
    params: MlpParams, acts: list[np.ndarray], upstream: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    k = _backend.kernels
    g = np.ascontiguousarray(upstream, dtype=np.float64)
    last = len(params.layers) - 1
    grads: list[Layer] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        layer = params.layers[i]
        dw, db, g = k.dense_backward(acts[i], layer.weight, acts[i + 1], g, i < last)
        grads[i] = Layer(np.asarray(dw), np.asarray(db))
        g = np.ascontiguousarray(g)
    return MlpParams(grads, params.activation), g


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch ``(n, in)``."""
    xb, single = _as_batch(params, x)
    y = forward_cache(params, xb)[-1]
    return y[0] if single else y


def mlp_backward(params: MlpParams, x, upstream_grad) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradients of ``<upstream_grad, mlp_forward(params, x)>``.

    For a batch, parameter gradients are summed over rows and the input
    gradient keeps the batch shape.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], params.out_dim):
        raise DimensionError(f"upstream grad shape {g.shape} != {(xb.shape[0], params.out_dim)}")
    grads, dx = backward_cache(params, forward_cache(params, xb), g)
    return grads, (dx[0] if single else dx)


@dataclass
class AdamState:
    n: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams | np.ndarray) -> MlpParams:
    """One bias-corrected Adam update (minimizing).  Mutates ``state``."""
    g = grads.flat() if isinstance(grads, MlpParams) else np.asarray(grads, dtype=np.float64)
    if g.shape != (state.n,) or params.n_params != state.n:
        raise DimensionError(f"gradient shape {g.shape} does not match optimizer size {state.n}")
    if not np.isfinite(g).all():
        raise DivergenceError("non-finite gradient in adam_step", state.step + 1)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params.with_flat(params.flat() - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


# ---------------------------------------------------------------------------
# checkpoints: "AFLW", u32 version, [u32 cond_dim if version 2], u32 layers,
# then per layer u32 rows, u32 cols, f64 weights (row-major), f64 biases.


def dumps_checkpoint(params: MlpParams, cond_dim: int | None = None) -> bytes:
    parts = [MAGIC]
    if cond_dim is None:
        parts.append(struct.pack("<I", VERSION_MLP))
    else:
        parts.append(struct.pack("<II", VERSION_FLOW, cond_dim))
    parts.append(struct.pack("<I", len(params.layers)))
    for l in params.layers:
        r, c = l.weight.shape
        parts.append(struct.pack("<II", r, c))
        parts.append(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_checkpoint(blob: bytes) -> tuple[MlpParams, int | None]:
    if blob[:4] != MAGIC:
        raise ValueError("not an AFLW checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    off = 8
    cond_dim = None
    if version == VERSION_FLOW:
        (cond_dim,) = struct.unpack_from("<I", blob, off)
        off += 4
    elif version != VERSION_MLP:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_layers,) = struct.unpack_from("<I", blob, off)
    off += 4
    layers = []
    for _ in range(n_layers):
        r, c = struct.unpack_from("<II", blob, off)
        off += 8
        w = np.frombuffer(blob, dtype="<f8", count=r * c, offset=off).reshape(r, c).astype(np.float64)
        off += 8 * r * c
        b = np.frombuffer(blob, dtype="<f8", count=r, offset=off).astype(np.float64)
        off += 8 * r
        layers.append(Layer(w, b))
    if off != len(blob):
        raise ValueError(f"trailing bytes in checkpoint ({len(blob) - off})")
    return MlpParams(layers), cond_dim


def save_checkpoint(path, params: MlpParams, cond_dim: int | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(params, cond_dim))


def load_checkpoint(path) -> tuple[MlpParams, int | None]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    return loads_checkpoint(path.read_bytes())
