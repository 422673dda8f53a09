"""Group-relative policy optimization over sampled flow trajectories."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dpg import sample_guided
from .errors import DivergenceError
from .flow import FlowField, _field_input
from .nn import AdamState, MlpParams, adam_step, backward_cache, forward_cache
from .rng import Rng
from .sampler import SamplerConfig, Trajectory, mean_from_velocity, sample_sde, sigma, velocity_coefficient
from .task import TaskInstance, TaskSpec, make_batch

MODES = ("flowgrpo", "beautygrpo")

RewardFn = Callable[[TaskInstance, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GrpoConfig:
    clip_eps: float = 0.2
    group_size: int = 8
    iterations: int = 300
    conditions_per_batch: int = 32
    eps_std: float = 1e-8
    lr: float = 1e-3
    inner_epochs: int = 1
    max_grad_norm: float | None = None
    lr_decay: str = "linear"  # or "constant"

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.iterations < 0 or self.conditions_per_batch < 1 or self.inner_epochs < 1:
            raise ValueError("iterations >= 0, conditions_per_batch >= 1, inner_epochs >= 1")
        if self.lr_decay not in ("constant", "linear"):
            raise ValueError("lr_decay must be 'constant' or 'linear'")

    def lr_at(self, iteration: int) -> float:
        if self.lr_decay == "linear":
            return self.lr * (1.0 - iteration / max(1, self.iterations))
        return self.lr


def standardize_advantages(rewards, eps_std: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()  # population std
    if std < eps_std:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_term(ratio, adv, eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any(ratio <= 0):
        raise ValueError("likelihood ratio must be positive")
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


@dataclass
class PolicySnapshot:
    params: MlpParams

    @classmethod
    def of(cls, flow: FlowField) -> "PolicySnapshot":
        return cls(flow.params.copy())


@dataclass
class RolloutGroup:
    instance: TaskInstance  # the shared condition, arrays of shape (D,)
    traj: Trajectory  # G members
    rewards: np.ndarray
    advantages: np.ndarray

    def __post_init__(self):
        if self.traj.n < 2 or self.rewards.shape != (self.traj.n,):
            raise ValueError("a group needs G >= 2 trajectories with one reward each")


def make_group(instance: TaskInstance, traj: Trajectory, rewards, eps_std: float = 1e-8) -> RolloutGroup:
    rewards = np.asarray(rewards, dtype=np.float64)
    return RolloutGroup(instance, traj, rewards, standardize_advantages(rewards, eps_std))


def _gather(groups: list[RolloutGroup]):
    """Flatten every likelihood-bearing step of every member."""
    cols = {k: [] for k in ("x", "nxt", "t", "dt", "c", "lam", "xs", "sig", "old", "adv")}
    for g in groups:
        tr = g.traj
        steps, members = np.nonzero(tr.stochastic)
        if steps.size == 0:
            raise ValueError("trajectory group carries no old log-probs")
        cols["x"].append(tr.states[steps, members])
        cols["nxt"].append(tr.states[steps + 1, members])
        cols["t"].append(tr.times[steps])
        cols["dt"].append(tr.times[steps] - tr.times[steps + 1])
        cols["c"].append(tr.cond[members])
        cols["lam"].append(tr.lam[steps, members])
        cols["xs"].append(tr.x_star[steps, members])
        cols["sig"].append(tr.sigma_step[steps])
        cols["old"].append(tr.logp[steps, members])
        cols["adv"].append(g.advantages[members])
    return {k: np.concatenate(v) for k, v in cols.items()}


def grpo_objective(flow: FlowField, snapshot: PolicySnapshot | None, groups: list[RolloutGroup],
                   eps: float, schedule) -> tuple[float, MlpParams]:
    """Clipped surrogate averaged over all recorded stochastic steps, and its
    gradient (ascent direction).

    Old log-probs are the ones recorded at rollout under ``snapshot``.
    """
    if not groups:
        raise ValueError("no rollout groups")
    b = _gather(groups)
    t, dt = b["t"], b["dt"]
    sig_t = sigma(schedule, t)
    inp = _field_input(b["x"], t, b["c"], flow.state_dim, flow.cond_dim)
    acts = forward_cache(flow.params, inp)
    v = acts[-1]
    tc, dtc, sc = t[:, None], dt[:, None], np.atleast_1d(sig_t)[:, None]
    mu = mean_from_velocity(b["x"], v, tc, dtc, sc)
    lam = b["lam"][:, None]
    mu_new = (1.0 - lam) * mu + lam * b["xs"]
    sig_new = (1.0 - b["lam"]) * b["sig"]
    diff = b["nxt"] - mu_new
    d = diff.shape[1]
    logp = -0.5 * d * np.log(2 * np.pi) - d * np.log(sig_new) - np.sum(diff * diff, axis=1) / (2 * sig_new**2)
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - b["old"])
    if not np.all(np.isfinite(ratio)):
        raise DivergenceError("non-finite likelihood ratio")
    adv = b["adv"]
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    m = ratio.size
    value = float(np.mean(np.minimum(unclipped, clipped)))
    # d term / d logp: A * r on the unclipped branch, 0 once the clip binds
    dlogp = np.where(unclipped <= clipped, adv * ratio, 0.0) / m
    dmu = (dlogp / sig_new**2)[:, None] * diff * (1.0 - lam)
    dv = -dmu * velocity_coefficient(tc, dtc, sc)
    grads, _ = backward_cache(flow.params, acts, np.ascontiguousarray(dv))
    return value, grads


# ---------------------------------------------------------------------------
# training loop


@dataclass
class IterationMetrics:
    iteration: int
    mode: str
    mean_reward: float
    std_reward: float
    mean_terminal_drift: float
    objective: float
    grad_norm: float
    wall_ms: float


@dataclass
class TrainResult:
    field: FlowField
    metrics: list[IterationMetrics] = field(default_factory=list)


def rollout(flow: FlowField, instances: TaskInstance, group_size: int, sampler: SamplerConfig,
            mode: str, seed: int, iteration: int) -> Trajectory:
    """``group_size`` trajectories per condition, condition-major order.

    Member ``(g, j)`` draws its initial noise and all later noise from the
    stream ``(seed, iteration, g, j)``.
    """
    n_cond, d = instances.x_in.shape
    rngs = [Rng(seed).split(iteration, g, j) for g in range(n_cond) for j in range(group_size)]
    x_T = np.array([r.normal(d) for r in rngs])
    cond = np.repeat(instances.x_in, group_size, axis=0)
    if mode == "flowgrpo":
        return sample_sde(flow, x_T, cond, sampler, rngs)
    if mode == "beautygrpo":
        anchors = np.repeat(instances.anchor, group_size, axis=0)
        return sample_guided(flow, x_T, cond, anchors, sampler, rngs)
    raise ValueError(f"unknown mode {mode!r}")


def train(
    flow: FlowField,
    spec: TaskSpec,
    reward_fn: RewardFn,
    config: GrpoConfig,
    sampler: SamplerConfig,
    mode: str,
    rng: Rng,
    callback: Callable[[IterationMetrics], None] | None = None,
) -> TrainResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    flow = flow.copy()
    opt = AdamState(flow.params.n_params, lr=config.lr)
    G, C = config.group_size, config.conditions_per_batch
    metrics = []
    for it in range(config.iterations):
        t0 = time.perf_counter()
        snapshot = PolicySnapshot.of(flow)
        opt.lr = config.lr_at(it)
        instances = make_batch(spec, rng.split(it, 1 << 20), C)
        traj = rollout(flow, instances, G, sampler, mode, rng.seed, it)
        expanded = TaskInstance(*(np.repeat(a, G, axis=0) for a in (instances.x_in, instances.clean, instances.anchor)))
        rewards = np.asarray(reward_fn(expanded, traj.terminal), dtype=np.float64)
        if not np.all(np.isfinite(rewards)):
            raise DivergenceError("non-finite reward", it)
        groups = [
            make_group(instances[g], traj.select(np.arange(g * G, (g + 1) * G)), rewards[g * G : (g + 1) * G], config.eps_std)
            for g in range(C)
        ]
        for _ in range(config.inner_epochs):
            value, grads = grpo_objective(flow, snapshot, groups, config.clip_eps, sampler.schedule)
            if not np.isfinite(value):
                raise DivergenceError("non-finite GRPO objective", it)
            g = grads.flat()
            gnorm = float(np.linalg.norm(g))
            if config.max_grad_norm is not None and gnorm > config.max_grad_norm:
                g = g * (config.max_grad_norm / gnorm)
            flow.params = adam_step(opt, flow.params, -g)
        drift = np.linalg.norm(traj.terminal - expanded.anchor, axis=1)
        m = IterationMetrics(it, mode, float(rewards.mean()), float(rewards.std()), float(drift.mean()),
                             value, gnorm, (time.perf_counter() - t0) * 1e3)
        metrics.append(m)
        if callback is not None:
            callback(m)
    return TrainResult(flow, metrics)
