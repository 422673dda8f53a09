"""Conditional velocity field and flow-matching pretraining.

Convention: ``x_t = (1 - t) x0 + t x1`` with data ``x0`` at ``t = 0`` and
Gaussian noise ``x1`` at ``t = 1``; the regression target is ``x1 - x0`` and
sampling integrates from ``t = 1`` down to ``t = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DivergenceError
from .nn import (
    AdamState,
    MlpParams,
    adam_step,
    backward_cache,
    forward_cache,
    load_checkpoint,
    save_checkpoint,
)
from .rng import Rng
from .task import TaskSpec, make_batch, sample_data

T_EPS = 1e-3


def _field_input(x, t, c, state_dim: int, cond_dim: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    c = np.asarray(c, dtype=np.float64)
    c = np.broadcast_to(c, (n, c.shape[-1])) if c.ndim <= 2 else c
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    if x.shape[1] != state_dim or c.shape[1] != cond_dim:
        raise DimensionError(
            f"field expects state {state_dim} / condition {cond_dim}, got {x.shape[1]} / {c.shape[1]}"
        )
    return np.ascontiguousarray(np.hstack([x, t, c]))


@dataclass
class FlowField:
    params: MlpParams
    state_dim: int
    cond_dim: int

    def __post_init__(self):
        if self.params.in_dim != self.state_dim + 1 + self.cond_dim:
            raise DimensionError("network input must be state_dim + 1 + cond_dim")
        if self.params.out_dim != self.state_dim:
            raise DimensionError("network output must equal state_dim")

    @classmethod
    def init(cls, state_dim: int, cond_dim: int, rng: Rng, hidden=(64, 64)) -> "FlowField":
        sizes = [state_dim + 1 + cond_dim, *hidden, state_dim]
        return cls(MlpParams.init(sizes, rng), state_dim, cond_dim)

    def velocity(self, x, t, c) -> np.ndarray:
        single = np.ndim(x) == 1
        v = forward_cache(self.params, _field_input(x, t, c, self.state_dim, self.cond_dim))[-1]
        return v[0] if single else v

    def velocity_vjp(self, x, t, c, upstream) -> tuple[np.ndarray, MlpParams]:
        """Velocity and the parameter gradient of ``sum(upstream * v)``."""
        inp = _field_input(x, t, c, self.state_dim, self.cond_dim)
        acts = forward_cache(self.params, inp)
        grads, _ = backward_cache(self.params, acts, np.atleast_2d(upstream))
        return acts[-1], grads

    def copy(self) -> "FlowField":
        return FlowField(self.params.copy(), self.state_dim, self.cond_dim)

    def save(self, path) -> None:
        save_checkpoint(path, self.params, cond_dim=self.cond_dim)

    @classmethod
    def load(cls, path) -> "FlowField":
        params, cond_dim = load_checkpoint(path)
        if cond_dim is None:
            raise DimensionError(f"{path} is a plain MLP checkpoint, not a flow field")
        return cls(params, params.out_dim, cond_dim)


def eval_field(field: FlowField, x, t, c) -> np.ndarray:
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ValueError("t must lie in [0, 1]")
    return field.velocity(x, t, c)


@dataclass
class FlowMatchBatch:
    x0: np.ndarray  # data, (n, D)
    x1: np.ndarray  # noise, (n, D)
    t: np.ndarray  # (n,)
    c: np.ndarray  # (n, C)

    def __post_init__(self):
        n = self.x0.shape[0]
        if not (self.x1.shape[0] == self.t.shape[0] == self.c.shape[0] == n):
            raise DimensionError("batch members differ in length")

    @property
    def xt(self) -> np.ndarray:
        t = self.t[:, None]
        return (1.0 - t) * self.x0 + t * self.x1

    @property
    def target(self) -> np.ndarray:
        return self.x1 - self.x0


def flow_match_loss(field: FlowField, batch: FlowMatchBatch, grad: bool = True):
    """Mean squared velocity error over the batch, with parameter gradients."""
    n = batch.x0.shape[0]
    if n == 0:
        raise ValueError("empty flow-matching batch")
    inp = _field_input(batch.xt, batch.t, batch.c, field.state_dim, field.cond_dim)
    acts = forward_cache(field.params, inp)
    resid = acts[-1] - batch.target
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.sum(resid * resid) / n)
    if not grad:
        return loss, None
    grads, _ = backward_cache(field.params, acts, 2.0 * resid / n)
    return loss, grads


def draw_batch(spec: TaskSpec, n: int, rng: Rng) -> FlowMatchBatch:
    inst = make_batch(spec, rng, n)
    x0 = sample_data(spec, inst, rng)
    x1 = rng.normal(x0.shape)
    t = T_EPS + (1.0 - 2.0 * T_EPS) * rng.uniforms(n)
    return FlowMatchBatch(x0, x1, t, inst.x_in)


@dataclass
class PretrainResult:
    field: FlowField
    losses: list[float] = field(default_factory=list)


def pretrain(
    flow: FlowField,
    spec: TaskSpec,
    steps: int,
    batch_size: int,
    rng: Rng,
    lr: float = 1e-3,
) -> PretrainResult:
    """Adam on the flow-matching loss with fresh task samples every step."""
    if steps < 1:
        raise ValueError("pretrain needs steps >= 1")
    flow = flow.copy()
    opt = AdamState(flow.params.n_params, lr=lr)
    losses = []
    for step in range(steps):
        loss, grads = flow_match_loss(flow, draw_batch(spec, batch_size, rng))
        if not np.isfinite(loss):
            raise DivergenceError("flow-matching loss is not finite", step)
        losses.append(loss)
        flow.params = adam_step(opt, flow.params, grads)
    return PretrainResult(flow, losses)
