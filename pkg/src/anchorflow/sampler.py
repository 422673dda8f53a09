"""Time grid, noise schedule, ODE and SDE samplers.

All samplers run a batch of trajectories at once: ``x_T`` has shape
``(n, D)`` (a single ``(D,)`` vector is promoted to ``n = 1``) and every
trajectory owns its own :class:`~anchorflow.rng.Rng` stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .rng import Rng

LOG_2PI = math.log(2.0 * math.pi)

ODE, SDE, DPG = 0, 1, 2
KIND_NAMES = {ODE: "ode", SDE: "sde", DPG: "dpg"}


@dataclass(frozen=True)
class NoiseSchedule:
    eta: float = 0.7
    t_eps: float = 0.1

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0 < self.t_eps < 0.5:
            raise ValueError("t_eps must lie in (0, 0.5)")


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 10
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    K: int = 3
    lambda_max: float = 0.95

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 1 <= self.K <= self.T:
            raise ValueError("K must satisfy 1 <= K <= T")
        if not 0 < self.lambda_max < 1:
            raise ValueError("lambda_max must lie in (0, 1)")

    @property
    def grid(self) -> np.ndarray:
        """``t_i = (T - i) / T`` for ``i = 0..T``, from 1 down to 0."""
        return (self.T - np.arange(self.T + 1)) / self.T

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    def step_index(self, i: int) -> int:
        """Reverse step index ``s`` of grid interval ``i`` (``s = T-1`` first)."""
        return self.T - 1 - i


def sigma(schedule: NoiseSchedule, t):
    """``eta * sqrt(t / (1 - t))`` with ``t`` clamped to ``[t_eps, 1 - t_eps]``."""
    tc = np.clip(t, schedule.t_eps, 1.0 - schedule.t_eps)
    out = schedule.eta * np.sqrt(tc / (1.0 - tc))
    return float(out) if np.ndim(out) == 0 else out


def mean_from_velocity(x, v, t: float, dt: float, sig: float):
    """Euler-Maruyama mean of the reverse-time SDE given the velocity."""
    return x - dt * (v + (sig * sig / (2.0 * t)) * (x + (1.0 - t) * v))


def velocity_coefficient(t: float, dt: float, sig: float) -> float:
    """``-d(mean)/dv``; the mean is affine in the velocity."""
    return dt * (1.0 + sig * sig * (1.0 - t) / (2.0 * t))


def ode_step(field, x, t: float, dt: float, c):
    if dt <= 0 or t - dt < -1e-12:
        raise ValueError(f"invalid ODE step t={t}, dt={dt}")
    return x - dt * field.velocity(x, t, c)


def sde_mean(field, x, t: float, dt: float, c, schedule: NoiseSchedule):
    if t <= 0:
        raise ValueError("sde_mean needs t > 0")
    if dt <= 0:
        raise ValueError("sde_mean needs dt > 0")
    return mean_from_velocity(x, field.velocity(x, t, c), t, dt, sigma(schedule, t))


@dataclass
class SdeStep:
    t: float
    dt: float
    mean: np.ndarray
    sigma_step: float
    z: np.ndarray
    next: np.ndarray


def sde_step(field, x, t: float, dt: float, c, schedule: NoiseSchedule, rng: Rng | None, z=None) -> SdeStep:
    """One FlowGRPO transition; ``z`` may be injected instead of drawn."""
    mu = sde_mean(field, x, t, dt, c, schedule)
    s = sigma(schedule, t) * math.sqrt(dt)
    if z is None:
        z = rng.normal(np.shape(mu))
    z = np.asarray(z, dtype=np.float64)
    return SdeStep(t, dt, mu, s, z, mu + s * z)


def gaussian_log_prob(x_next, mean, std):
    """Isotropic Gaussian log-density over the last axis, constants included."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("gaussian_log_prob needs std > 0 (degenerate transition)")
    diff = np.asarray(x_next, dtype=np.float64) - mean
    d = diff.shape[-1]
    return -0.5 * d * LOG_2PI - d * np.log(std) - np.sum(diff * diff, axis=-1) / (2.0 * std * std)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class StepRecord:
    kind: str
    s: int
    t: float
    dt: float
    state: np.ndarray
    mean: np.ndarray
    sigma_step: float
    z: np.ndarray
    next: np.ndarray
    logp: float | None
    lam: float = 0.0
    x_star: np.ndarray | None = None
    sigma_new: float = 0.0


@dataclass
class Trajectory:
    """A batch of ``n`` chained trajectories over the ``T``-step grid.

    ``states[i]`` is the input of grid step ``i``; ``states[i + 1]`` its output.
    ``logp`` is NaN where a step carries no likelihood.
    """

    cond: np.ndarray  # (n, C)
    times: np.ndarray  # (T + 1,)
    states: np.ndarray  # (T + 1, n, D)
    means: np.ndarray  # (T, n, D)
    sigma_step: np.ndarray  # (T,)
    z: np.ndarray  # (T, n, D)
    logp: np.ndarray  # (T, n)
    kind: np.ndarray  # (T, n) int codes
    lam: np.ndarray  # (T, n)
    x_star: np.ndarray  # (T, n, D)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    @property
    def x_T(self) -> np.ndarray:
        return self.states[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def stochastic(self) -> np.ndarray:
        return ~np.isnan(self.logp)

    @property
    def sigma_new(self) -> np.ndarray:
        return (1.0 - self.lam) * self.sigma_step[:, None]

    def records(self, member: int = 0) -> list[StepRecord]:
        out = []
        for i in range(self.T):
            lp = self.logp[i, member]
            out.append(
                StepRecord(
                    kind=KIND_NAMES[int(self.kind[i, member])],
                    s=self.T - 1 - i,
                    t=float(self.times[i]),
                    dt=float(self.times[i] - self.times[i + 1]),
                    state=self.states[i, member],
                    mean=self.means[i, member],
                    sigma_step=float(self.sigma_step[i]),
                    z=self.z[i, member],
                    next=self.states[i + 1, member],
                    logp=None if np.isnan(lp) else float(lp),
                    lam=float(self.lam[i, member]),
                    x_star=self.x_star[i, member],
                    sigma_new=float(self.sigma_new[i, member]),
                )
            )
        return out

    def select(self, idx) -> "Trajectory":
        """Sub-batch of members."""
        idx = np.atleast_1d(idx)
        return Trajectory(
            self.cond[idx], self.times, self.states[:, idx], self.means[:, idx], self.sigma_step,
            self.z[:, idx], self.logp[:, idx], self.kind[:, idx], self.lam[:, idx], self.x_star[:, idx],
        )

    @classmethod
    def concat(cls, trajs: Sequence["Trajectory"]) -> "Trajectory":
        return cls(
            np.concatenate([t.cond for t in trajs]), trajs[0].times,
            *(np.concatenate([getattr(t, k) for t in trajs], axis=1) for k in ("states", "means")),
            trajs[0].sigma_step,
            *(np.concatenate([getattr(t, k) for t in trajs], axis=1) for k in ("z", "logp", "kind", "lam", "x_star")),
        )


def _prepare(x_T, c, rngs) -> tuple[np.ndarray, np.ndarray, list]:
    x = np.atleast_2d(np.asarray(x_T, dtype=np.float64))
    n = x.shape[0]
    c = np.asarray(c, dtype=np.float64)
    c = np.array(np.broadcast_to(c, (n, c.shape[-1])))
    if rngs is None:
        rngs = [None] * n
    elif isinstance(rngs, Rng):
        if n != 1:
            raise ValueError("pass one Rng per trajectory for batched sampling")
        rngs = [rngs]
    if len(rngs) != n:
        raise DimensionError(f"{len(rngs)} rng streams for {n} trajectories")
    return x, c, list(rngs)


def _empty(config: SamplerConfig, x: np.ndarray, c: np.ndarray) -> Trajectory:
    T, (n, d) = config.T, x.shape
    states = np.empty((T + 1, n, d))
    states[0] = x
    return Trajectory(
        cond=c,
        times=config.grid,
        states=states,
        means=np.zeros((T, n, d)),
        sigma_step=np.zeros(T),
        z=np.zeros((T, n, d)),
        logp=np.full((T, n), np.nan),
        kind=np.zeros((T, n), dtype=np.int8),
        lam=np.zeros((T, n)),
        x_star=np.zeros((T, n, d)),
    )


def draw_noise(rngs: list, d: int, members) -> np.ndarray:
    """One ``d``-vector per listed member, each from that member's stream."""
    return np.array([rngs[j].normal(d) for j in members]).reshape(len(members), d)


def sample_ode(field, x_T, c, config: SamplerConfig) -> Trajectory:
    x, c, _ = _prepare(x_T, c, None)
    traj = _empty(config, x, c)
    times = config.grid
    for i in range(config.T):
        t, dt = float(times[i]), float(times[i] - times[i + 1])
        nxt = ode_step(field, traj.states[i], t, dt, c)
        traj.means[i] = nxt
        traj.states[i + 1] = nxt
    return traj


def sample_sde(field, x_T, c, config: SamplerConfig, rngs) -> Trajectory:
    """FlowGRPO sampling: every step is stochastic and records its log-prob."""
    x, c, rngs = _prepare(x_T, c, rngs)
    traj = _empty(config, x, c)
    times = config.grid
    members = range(x.shape[0])
    for i in range(config.T):
        t, dt = float(times[i]), float(times[i] - times[i + 1])
        z = draw_noise(rngs, x.shape[1], members)
        step = sde_step(field, traj.states[i], t, dt, c, config.schedule, None, z=z)
        traj.means[i], traj.z[i], traj.states[i + 1] = step.mean, z, step.next
        traj.sigma_step[i] = step.sigma_step
        traj.kind[i] = SDE
        if step.sigma_step > 0:
            traj.logp[i] = gaussian_log_prob(step.next, step.mean, step.sigma_step)
    return traj


# ---------------------------------------------------------------------------
# line-delimited trajectory records

RECORD_FIELDS = (
    "kind", "s", "t", "dt", "state", "mean", "sigma_step", "z", "next", "logp",
    "lam", "x_star", "sigma_new",
)


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, (int, np.integer, str)):
        return str(v)
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    body = ",".join(format(float(a), ".17g") for a in arr)
    return body if np.ndim(v) == 0 else "[" + body + "]"


def format_record(rec: StepRecord) -> str:
    """Tab-separated fields in ``RECORD_FIELDS`` order; vectors as ``[a,b,...]``."""
    return "\t".join(_fmt(getattr(rec, k)) for k in RECORD_FIELDS)


def parse_record(line: str) -> StepRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(RECORD_FIELDS):
        raise ValueError(f"expected {len(RECORD_FIELDS)} fields, got {len(parts)}")
    vals = {}
    for k, p in zip(RECORD_FIELDS, parts):
        if k == "kind":
            vals[k] = p
        elif k == "s":
            vals[k] = int(p)
        elif p.startswith("["):
            vals[k] = np.array([float(a) for a in p[1:-1].split(",")])
        else:
            vals[k] = float(p)
    if np.isnan(vals["logp"]):
        vals["logp"] = None
    return StepRecord(**vals)


def write_trajectory(path, traj: Trajectory, member: int = 0) -> None:
    with open(path, "w") as fh:
        for rec in traj.records(member):
            fh.write(format_record(rec) + "\n")


def read_records(path) -> list[StepRecord]:
    with open(path) as fh:
        return [parse_record(line) for line in fh if line.strip()]
