"""Anchor-guided exploration for the FlowGRPO sampler.

A guided step replaces the Gaussian draw ``z`` of the SDE update with a
blend of a deterministic correction (the noise that would land exactly on
the straight-line path toward the anchor) and fresh noise.  The resulting
transition is ``N((1-lam) mu + lam x_star, ((1-lam) sigma_step)^2 I)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .rng import Rng
from .sampler import (
    DPG,
    ODE,
    SamplerConfig,
    Trajectory,
    _empty,
    _prepare,
    draw_noise,
    gaussian_log_prob,
    mean_from_velocity,
    ode_step,
    sde_mean,
    sigma,
)


@dataclass(frozen=True)
class LambdaSchedule:
    T: int
    lambda_max: float = 0.95

    def __post_init__(self):
        if not 0 < self.lambda_max < 1:
            raise ValueError("lambda_max must lie in (0, 1)")


def lambda_at(schedule: LambdaSchedule, s: int) -> float:
    """Linear guidance weight ``s / max(1, T-1)``, clamped at ``lambda_max``.

    ``s`` counts down: the first reverse step has ``s = T - 1``.
    """
    if not 0 <= s <= schedule.T - 1:
        raise ValueError(f"step index {s} outside [0, {schedule.T - 1}]")
    return min(s / max(1, schedule.T - 1), schedule.lambda_max)


def anchor_target(x_t, t: float, dt: float, anchor):
    """Point a fraction ``dt / t`` of the way from ``x_t`` to the anchor."""
    if t <= 0 or dt <= 0 or dt > t:
        raise ValueError(f"anchor_target needs 0 < dt <= t (t={t}, dt={dt})")
    if dt == t:
        return np.array(np.broadcast_to(anchor, np.shape(x_t)), dtype=np.float64)
    w = dt / t
    return w * np.asarray(anchor) + (1.0 - w) * np.asarray(x_t)


def anchor_noise(x_star, mu, sigma_step: float):
    if sigma_step <= 0:
        raise ValueError("anchor correction undefined for a noiseless step")
    return (np.asarray(x_star) - mu) / sigma_step


def mix_noise(lam: float, z_anchor, z_std):
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * np.asarray(z_anchor) + (1.0 - lam) * np.asarray(z_std)


def guided_next(mu, x_star, lam: float, sigma_step: float, z_std):
    return (1.0 - lam) * mu + lam * x_star + ((1.0 - lam) * sigma_step) * z_std


@dataclass
class GuidedStep:
    s: int
    t: float
    dt: float
    lam: float
    mean: np.ndarray  # model mean mu_t
    sigma_step: float
    x_star: np.ndarray
    z_anchor: np.ndarray
    z_std: np.ndarray
    mu_new: np.ndarray
    sigma_new: float
    next: np.ndarray
    logp: np.ndarray


def dpg_step(
    field, x, s: int, t: float, dt: float, c, anchor, schedule, lsched: LambdaSchedule,
    rng: Rng | None, z_std=None,
) -> GuidedStep:
    mu = sde_mean(field, x, t, dt, c, schedule)
    sig = sigma(schedule, t) * math.sqrt(dt)
    x_star = anchor_target(x, t, dt, anchor)
    lam = lambda_at(lsched, s)
    if z_std is None:
        z_std = rng.normal(np.shape(mu))
    z_std = np.asarray(z_std, dtype=np.float64)
    nxt = guided_next(mu, x_star, lam, sig, z_std)
    mu_new = (1.0 - lam) * mu + lam * x_star
    sig_new = (1.0 - lam) * sig
    return GuidedStep(
        s, t, dt, lam, mu, sig, x_star, anchor_noise(x_star, mu, sig), z_std, mu_new, sig_new,
        nxt, gaussian_log_prob(nxt, mu_new, sig_new),
    )


@dataclass(frozen=True)
class SegmentPlan:
    bounds: tuple[int, ...]  # K + 1 boundaries over step indices 0..T
    picks: tuple[int, ...]  # one step index per segment

    def segments(self) -> list[tuple[int, int]]:
        return list(zip(self.bounds[:-1], self.bounds[1:]))


def plan_segments(T: int, K: int, rng: Rng) -> SegmentPlan:
    """Split ``[0, T)`` at ``floor(i T / K)`` and pick one index per segment."""
    if not 1 <= K <= T:
        raise ValueError(f"need 1 <= K <= T, got K={K}, T={T}")
    bounds = tuple((i * T) // K for i in range(K + 1))
    picks = tuple(lo if hi - lo == 1 else rng.integers(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return SegmentPlan(bounds, picks)


def sample_guided(field, x_T, c, anchor, config: SamplerConfig, rngs, plans=None) -> Trajectory:
    """K guided stochastic steps per trajectory, deterministic ODE steps elsewhere.

    Each member first draws its segment plan, then one noise vector per
    guided step, all from its own stream.
    """
    x, c, rngs = _prepare(x_T, c, rngs)
    n, d = x.shape
    anchor = np.array(np.broadcast_to(np.asarray(anchor, dtype=np.float64), (n, d)))
    if anchor.shape[-1] != d:
        raise DimensionError("anchor dimension does not match state")
    if plans is None:
        plans = [plan_segments(config.T, config.K, r) for r in rngs]
    lsched = LambdaSchedule(config.T, config.lambda_max)
    traj = _empty(config, x, c)
    times = config.grid
    for i in range(config.T):
        s = config.step_index(i)
        t, dt = float(times[i]), float(times[i] - times[i + 1])
        xi = traj.states[i]
        v = field.velocity(xi, t, c)
        sig_t = sigma(config.schedule, t)
        sig = sig_t * math.sqrt(dt)
        traj.sigma_step[i] = sig
        guided = np.array([s in p.picks for p in plans], dtype=bool)
        nxt = xi - dt * v
        traj.means[i] = nxt
        if guided.any():
            members = np.flatnonzero(guided)
            mu = mean_from_velocity(xi[members], v[members], t, dt, sig_t)
            x_star = anchor_target(xi[members], t, dt, anchor[members])
            lam = lambda_at(lsched, s)
            z = draw_noise(rngs, d, members)
            g_next = guided_next(mu, x_star, lam, sig, z)
            nxt[members] = g_next
            traj.means[i, members] = mu
            traj.z[i, members] = z
            traj.x_star[i, members] = x_star
            traj.lam[i, members] = lam
            traj.kind[i, members] = DPG
            traj.logp[i, members] = gaussian_log_prob(
                g_next, (1.0 - lam) * mu + lam * x_star, (1.0 - lam) * sig
            )
        traj.kind[i, ~guided] = ODE
        traj.states[i + 1] = nxt
    return traj


def guided_log_prob(field, x, t: float, dt: float, c, lam: float, x_star, sigma_step: float, x_next, schedule):
    """Transition log-density of a recorded guided step under ``field``.

    Only the model mean is recomputed; ``lam``, ``x_star`` and ``sigma_step``
    are the values frozen at rollout time.
    """
    if lam >= 1:
        raise ValueError("guided_log_prob needs lambda < 1")
    mu = sde_mean(field, x, t, dt, c, schedule)
    return gaussian_log_prob(x_next, (1.0 - lam) * mu + lam * np.asarray(x_star), (1.0 - lam) * sigma_step)
