"""Synthetic retouching task.

A state vector splits into three parts: *blemish* coordinates (should be
zero after retouching), *identity* coordinates (should match the hidden clean
identity, which the degraded input carries unchanged), and one *texture*
coordinate (should equal ``texture_target``).  The anchor is a good but not
optimal edit: clean, with texture overshooting the target by a factor
``1 + anchor_offset``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .errors import DimensionError, DivergenceError
from .nn import AdamState, MlpParams, adam_step, backward_cache, forward_cache
from .rng import Rng

TIE_EPS = 1e-6


@dataclass(frozen=True)
class TaskSpec:
    state_dim: int = 8
    blemish_dims: int = 3
    texture_index: int = -1
    texture_target: float = 1.0
    anchor_offset: float = 0.1
    alpha: float = 1.0  # blemish weight
    beta: float = 1.0  # identity weight
    gamma: float = 0.5  # texture weight
    blemish_scale: float = 0.7
    texture_noise: float = 0.3
    # supervised "retouch" data used for flow-matching pretraining
    data_blemish_keep: float = 0.15
    data_jitter: float = 0.01
    data_seed: int = 7

    def __post_init__(self):
        if self.blemish_dims + 1 > self.state_dim:
            raise ValueError("blemish_dims + 1 must not exceed state_dim")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("reward weights must be non-negative")
        if self.anchor_offset == 0:
            raise ValueError("anchor_offset must be non-zero")
        if self.tex in range(self.blemish_dims):
            raise ValueError("texture coordinate overlaps the blemish block")

    @property
    def tex(self) -> int:
        return self.texture_index % self.state_dim

    @property
    def blemish_slice(self) -> slice:
        return slice(0, self.blemish_dims)

    @property
    def identity_mask(self) -> np.ndarray:
        mask = np.ones(self.state_dim, dtype=bool)
        mask[self.blemish_slice] = False
        mask[self.tex] = False
        return mask

    @property
    def anchor_reward(self) -> float:
        return -self.gamma * (self.texture_target * self.anchor_offset) ** 2


@dataclass
class TaskInstance:
    """One condition.  Arrays are ``(D,)`` or, for a batch, ``(n, D)``."""

    x_in: np.ndarray
    clean: np.ndarray  # hidden clean state: zero blemish, clean identity, target texture
    anchor: np.ndarray

    def __len__(self) -> int:
        return 1 if self.x_in.ndim == 1 else self.x_in.shape[0]

    def __getitem__(self, i) -> "TaskInstance":
        return TaskInstance(self.x_in[i], self.clean[i], self.anchor[i])


def make_batch(spec: TaskSpec, rng: Rng, n: int) -> TaskInstance:
    d = spec.state_dim
    z = rng.normal((n, d))
    optimum = np.zeros((n, d))
    optimum[:, spec.identity_mask] = z[:, spec.identity_mask]
    optimum[:, spec.tex] = spec.texture_target

    x_in = optimum.copy()
    x_in[:, spec.blemish_slice] = spec.blemish_scale * z[:, spec.blemish_slice]
    x_in[:, spec.tex] += spec.texture_noise * z[:, spec.tex]

    anchor = optimum.copy()
    anchor[:, spec.tex] = spec.texture_target * (1.0 + spec.anchor_offset)
    return TaskInstance(x_in, optimum, anchor)


def make_instance(spec: TaskSpec, rng: Rng) -> TaskInstance:
    return make_batch(spec, rng, 1)[0]


def sample_data(spec: TaskSpec, inst: TaskInstance, rng: Rng) -> np.ndarray:
    """Draw supervised retouch outputs for flow-matching pretraining.

    Imperfect edits: part of the blemish survives, texture sits at the
    anchor's level, and everything is jittered.
    """
    x = np.array(inst.anchor, dtype=np.float64, copy=True)
    x[..., spec.blemish_slice] = spec.data_blemish_keep * inst.x_in[..., spec.blemish_slice]
    return x + spec.data_jitter * rng.normal(x.shape)


def _check_dims(spec: TaskSpec, x: np.ndarray) -> None:
    if x.shape[-1] != spec.state_dim:
        raise DimensionError(f"state has {x.shape[-1]} dims, task uses {spec.state_dim}")


def reward_terms(spec: TaskSpec, inst: TaskInstance, x_out) -> dict[str, np.ndarray]:
    """Unweighted squared errors per quality dimension."""
    x = np.asarray(x_out, dtype=np.float64)
    _check_dims(spec, x)
    diff = x - inst.clean
    return {
        "blemish": np.sum(x[..., spec.blemish_slice] ** 2, axis=-1),
        "identity": np.sum(diff[..., spec.identity_mask] ** 2, axis=-1),
        "texture": diff[..., spec.tex] ** 2,
    }


def analytic_reward(spec: TaskSpec, inst: TaskInstance, x_out):
    """Reward <= 0, zero exactly at the clean state."""
    t = reward_terms(spec, inst, x_out)
    return -spec.alpha * t["blemish"] - spec.beta * t["identity"] - spec.gamma * t["texture"]


# ---------------------------------------------------------------------------
# preference pairs


@dataclass
class PreferencePair:
    condition: np.ndarray
    a: np.ndarray
    b: np.ndarray
    label: int  # +1: A preferred, -1: B preferred

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.condition, self.b, self.a, -self.label)

    def to_json(self) -> str:
        return json.dumps(
            {
                "condition": self.condition.tolist(),
                "a": self.a.tolist(),
                "b": self.b.tolist(),
                "label": "A" if self.label > 0 else "B",
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "PreferencePair":
        d = json.loads(line)
        return cls(
            np.array(d["condition"], dtype=np.float64),
            np.array(d["a"], dtype=np.float64),
            np.array(d["b"], dtype=np.float64),
            1 if d["label"] == "A" else -1,
        )


def preference_label(spec: TaskSpec, inst: TaskInstance, a, b) -> int:
    """+1 if A is better, -1 if B is better, 0 for a tie (gap < TIE_EPS)."""
    gap = float(analytic_reward(spec, inst, a) - analytic_reward(spec, inst, b))
    if abs(gap) < TIE_EPS:
        return 0
    return 1 if gap > 0 else -1


def random_candidates(spec: TaskSpec, inst: TaskInstance, rng: Rng, n: int, noise: float) -> np.ndarray:
    """Edits between the anchor and the raw input, plus isotropic noise."""
    w = rng.uniforms(n)[:, None]
    s = rng.uniforms(n)[:, None]
    eps = rng.normal((n, spec.state_dim))
    return (1.0 - w) * inst.anchor + w * inst.x_in + noise * s * eps


def _candidate(spec: TaskSpec, inst: TaskInstance, rng: Rng, noise: float) -> np.ndarray:
    kind = rng.integers(0, 10)
    if kind == 0:
        return inst.anchor.copy()
    if kind == 1:
        return inst.x_in.copy()
    if kind == 2:
        return inst.clean.copy()
    return random_candidates(spec, inst, rng, 1, noise)[0]


def make_preference_pairs(
    spec: TaskSpec, n: int, candidate_noise: float, rng: Rng
) -> list[PreferencePair]:
    if n < 1:
        raise ValueError("need n >= 1 pairs")
    pairs: list[PreferencePair] = []
    while len(pairs) < n:
        inst = make_instance(spec, rng)
        a = _candidate(spec, inst, rng, candidate_noise)
        b = _candidate(spec, inst, rng, candidate_noise)
        label = preference_label(spec, inst, a, b)
        if label:
            pairs.append(PreferencePair(inst.x_in, a, b, label))
    return pairs


def save_pairs(path, pairs: list[PreferencePair]) -> None:
    Path(path).write_text("".join(p.to_json() + "\n" for p in pairs))


def load_pairs(path) -> list[PreferencePair]:
    return [PreferencePair.from_json(l) for l in Path(path).read_text().splitlines() if l.strip()]


# ---------------------------------------------------------------------------
# Bradley-Terry reward net


@dataclass
class RewardNet:
    params: MlpParams
    state_dim: int

    @classmethod
    def init(cls, state_dim: int, rng: Rng, hidden: int = 64) -> "RewardNet":
        return cls(MlpParams.init([2 * state_dim, hidden, hidden, 1], rng), state_dim)


def reward_net_score(net: RewardNet, condition, x_out):
    c = np.asarray(condition, dtype=np.float64)
    x = np.asarray(x_out, dtype=np.float64)
    if c.shape[-1] != net.state_dim or x.shape[-1] != net.state_dim:
        raise DimensionError("condition / candidate dims do not match the reward net")
    single = x.ndim == 1
    c, x = np.atleast_2d(c), np.atleast_2d(x)
    c = np.broadcast_to(c, x.shape)
    out = forward_cache(net.params, np.ascontiguousarray(np.hstack([c, x])))[-1][:, 0]
    return float(out[0]) if single else out


def preference_probability(r_a, r_b):
    """Bradley-Terry P(A > B)."""
    return expit(np.asarray(r_a) - np.asarray(r_b))


def _pair_arrays(pairs: list[PreferencePair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack as (winner inputs, loser inputs), each (n, 2D)."""
    cond = np.array([p.condition for p in pairs])
    a = np.array([p.a for p in pairs])
    b = np.array([p.b for p in pairs])
    lab = np.array([p.label for p in pairs])[:, None] > 0
    win = np.where(lab, a, b)
    lose = np.where(lab, b, a)
    return np.hstack([cond, win]), np.hstack([cond, lose])


def pairwise_loss(params: MlpParams, win: np.ndarray, lose: np.ndarray, grad: bool = True):
    """Mean of ``-log sigmoid(r_win - r_lose)`` and its parameter gradient."""
    n = win.shape[0]
    x = np.ascontiguousarray(np.vstack([win, lose]))
    acts = forward_cache(params, x)
    r = acts[-1][:, 0]
    margin = r[:n] - r[n:]
    loss = float(-np.mean(log_expit(margin)))
    if not grad:
        return loss, None
    dm = -expit(-margin) / n
    up = np.concatenate([dm, -dm])[:, None]
    grads, _ = backward_cache(params, acts, up)
    return loss, grads


def pair_accuracy(net: RewardNet, pairs: list[PreferencePair]) -> float:
    win, lose = _pair_arrays(pairs)
    r_w = forward_cache(net.params, np.ascontiguousarray(win))[-1][:, 0]
    r_l = forward_cache(net.params, np.ascontiguousarray(lose))[-1][:, 0]
    return float(np.mean(r_w > r_l))


@dataclass
class RewardTraining:
    net: RewardNet
    train_loss: list[float]
    heldout_accuracy: list[float]


def train_reward_net(
    pairs: list[PreferencePair],
    epochs: int,
    rng: Rng,
    heldout: float = 0.2,
    batch_size: int = 128,
    lr: float = 1e-3,
    hidden: int = 64,
) -> RewardTraining:
    """Minibatch Adam on the pairwise logistic loss.

    The last ``heldout`` fraction of ``pairs`` is kept for accuracy; the loss
    curve is the full training-set loss after each epoch.
    """
    if not pairs:
        raise ValueError("no preference pairs")
    n_hold = int(round(heldout * len(pairs)))
    train, hold = pairs[: len(pairs) - n_hold], pairs[len(pairs) - n_hold :]
    if not train:
        raise ValueError("held-out split leaves no training pairs")
    d = pairs[0].a.shape[0]
    net = RewardNet.init(d, rng, hidden)
    opt = AdamState(net.params.n_params, lr=lr)
    win, lose = _pair_arrays(train)
    losses, accs = [], []
    for epoch in range(epochs):
        order = np.argsort(rng.uniforms(len(train)), kind="stable")
        for start in range(0, len(train), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = pairwise_loss(net.params, win[idx], lose[idx])
            if not np.isfinite(loss):
                raise DivergenceError("reward-net loss is not finite", epoch)
            net.params = adam_step(opt, net.params, grads)
        losses.append(pairwise_loss(net.params, win, lose, grad=False)[0])
        accs.append(pair_accuracy(net, hold) if hold else float("nan"))
    return RewardTraining(net, losses, accs)


def spec_dict(spec: TaskSpec) -> dict:
    return asdict(spec)
