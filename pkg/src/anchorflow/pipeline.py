"""Experiment stages behind the command-line tool.

A run directory holds ``config.toml``, ``manifest.json`` and one
subdirectory per stage.  Random streams are keyed by ``(seed, stage)`` so a
stage reruns identically no matter which stages ran before it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dumps
from .errors import ConfigError, DivergenceError, MissingArtifactError
from .flow import FlowField, pretrain
from .grpo import MODES, IterationMetrics, train
from .nn import load_checkpoint, save_checkpoint
from .report import (
    RunManifest,
    atomic_write,
    line_chart,
    load_manifest,
    read_csv,
    record_stage,
    sha256_file,
    write_csv,
)
from .rng import derive, normals_drawn
from .sampler import SamplerConfig, sample_ode
from .task import (
    RewardNet,
    TaskSpec,
    analytic_reward,
    make_batch,
    make_preference_pairs,
    reward_net_score,
    reward_terms,
    save_pairs,
    train_reward_net,
)

# stream ids under the run seed
S_FIELD_INIT, S_PRETRAIN, S_RL, S_EVAL, S_REWARD_NET = 1, 2, 3, 4, 5

METRIC_COLUMNS = [
    "iteration", "mode", "mean_reward", "std_reward", "mean_terminal_drift", "objective", "grad_norm", "wall_ms",
]
EVAL_KEYS = ("mean_reward", "terminal_drift", "blemish_residual", "identity_deviation", "texture_error")


class Run:
    """A run directory bound to one config."""

    def __init__(self, root, config: RunConfig):
        self.root = Path(root)
        self.config = config
        self.root.mkdir(parents=True, exist_ok=True)
        m = load_manifest(self.root)
        if m is not None and m.config_sha256 != config.digest():
            raise ConfigError(
                f"{self.root} was created with a different configuration (sha256 {m.config_sha256[:12]}); "
                "use a fresh --out directory"
            )
        self.manifest = m or RunManifest(config.digest(), __version__)
        atomic_write(self.root / "config.toml", dumps(config))
        atomic_write(self.root / "manifest.json", self.manifest.to_json())

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def record(self, stage: str, artifacts: list, status: str = "complete") -> None:
        record_stage(self.root, self.manifest, stage, status, [self.root / "config.toml", *artifacts])


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"required artifact {p} not found")
    return p


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(config: RunConfig, out) -> Path:
    run = Run(out, config)
    run.record("pretrain", [], status="running")
    spec = config.task
    flow = FlowField.init(spec.state_dim, spec.state_dim, derive(config.seed, S_FIELD_INIT))
    pc = config.pretrain
    res = pretrain(flow, spec, pc.steps, pc.batch_size, derive(config.seed, S_PRETRAIN), lr=pc.lr)
    ckpt, losses = run.path("pretrain", "flow.bin"), run.path("pretrain", "loss.csv")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    res.field.save(ckpt)
    write_csv(losses, ["step", "loss"], enumerate(res.losses))
    run.record("pretrain", [ckpt, losses])
    return ckpt


# ---------------------------------------------------------------------------
# reward net


def learn_reward(config: RunConfig):
    """Preference pairs (fixed by the task's data seed) and the trained net."""
    rc, spec = config.reward_net, config.task
    pairs = make_preference_pairs(spec, rc.pairs, rc.candidate_noise, derive(spec.data_seed, 0))
    tr = train_reward_net(
        pairs, rc.epochs, derive(config.seed, S_REWARD_NET),
        heldout=rc.heldout, batch_size=rc.batch_size, lr=rc.lr, hidden=rc.hidden,
    )
    return pairs, tr


def ensure_reward_net(run: Run) -> RewardNet:
    """Load the run's learned reward, training it first if absent."""
    ckpt = run.path("reward_net", "reward.bin")
    spec = run.config.task
    if ckpt.is_file():
        params, _ = load_checkpoint(ckpt)
        return RewardNet(params, spec.state_dim)
    run.record("reward_net", [], status="running")
    pairs, tr = learn_reward(run.config)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, tr.net.params)
    pairs_path, curve = run.path("reward_net", "pairs.jsonl"), run.path("reward_net", "curve.csv")
    save_pairs(pairs_path, pairs)
    write_csv(curve, ["epoch", "train_loss", "heldout_accuracy"],
              ((e, l, a) for e, (l, a) in enumerate(zip(tr.train_loss, tr.heldout_accuracy))))
    run.record("reward_net", [ckpt, pairs_path, curve])
    return tr.net


def reward_function(run: Run):
    spec = run.config.task
    if run.config.reward == "analytic":
        return partial(analytic_reward, spec)
    net = ensure_reward_net(run)
    return lambda inst, x: reward_net_score(net, inst.x_in, x)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(flow: FlowField, spec: TaskSpec, sampler: SamplerConfig, n: int, seed: int) -> dict[str, float]:
    """ODE-only deployment metrics over ``n`` fresh conditions (analytic oracle)."""
    rng = derive(seed, S_EVAL)
    inst = make_batch(spec, rng, n)
    x_T = rng.normal((n, spec.state_dim))
    before = normals_drawn()
    out = sample_ode(flow, x_T, inst.x_in, sampler).terminal
    if normals_drawn() != before:
        raise RuntimeError("evaluation consumed Gaussian draws; it must be noiseless")
    terms = reward_terms(spec, inst, out)
    report = {
        "mean_reward": float(np.mean(analytic_reward(spec, inst, out))),
        "terminal_drift": float(np.mean(np.linalg.norm(out - inst.anchor, axis=1))),
        "blemish_residual": float(np.mean(terms["blemish"])),
        "identity_deviation": float(np.mean(terms["identity"])),
        "texture_error": float(np.mean(terms["texture"])),
    }
    if not all(math.isfinite(v) for v in report.values()):
        raise DivergenceError(f"non-finite evaluation metrics: {report}")
    return report


def _report_json(report: dict, checkpoint, n: int) -> str:
    d = dict(report)
    d["instances"] = n
    d["checkpoint_sha256"] = sha256_file(checkpoint)
    return json.dumps(d, indent=2) + "\n"


def cmd_eval(config: RunConfig, checkpoint, out=None) -> dict[str, float]:
    checkpoint = _require(checkpoint)
    flow = FlowField.load(checkpoint)
    report = evaluate(flow, config.task, config.sampler.build(), config.eval.instances, config.seed)
    if out is not None:
        run = Run(out, config)
        dest = run.path("eval", Path(checkpoint).stem + ".json")
        atomic_write(dest, _report_json(report, checkpoint, config.eval.instances))
        run.record(f"eval:{Path(checkpoint).stem}", [dest])
    return report


# ---------------------------------------------------------------------------
# RL


def _metric_rows(metrics: list[IterationMetrics]):
    for m in metrics:
        yield [m.iteration, m.mode, m.mean_reward, m.std_reward, m.mean_terminal_drift, m.objective, m.grad_norm, m.wall_ms]


def _train_stage(run: Run, stage: str, mode: str, init, sampler: SamplerConfig, log=None) -> dict[str, float]:
    config = run.config
    flow = FlowField.load(_require(init))
    reward_fn = reward_function(run)
    run.record(stage, [], status="running")

    def progress(m: IterationMetrics):
        if log is not None and (m.iteration % 25 == 0 or m.iteration == config.grpo.iterations - 1):
            log(f"[{stage}] it {m.iteration:4d}  reward {m.mean_reward:+.5f}  drift {m.mean_terminal_drift:.4f}")

    res = train(flow, config.task, reward_fn, config.grpo.build(), sampler, mode, derive(config.seed, S_RL), progress)
    ckpt, metrics, ev = run.path(stage, "flow.bin"), run.path(stage, "metrics.csv"), run.path(stage, "eval.json")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    res.field.save(ckpt)
    write_csv(metrics, METRIC_COLUMNS, _metric_rows(res.metrics))
    report = evaluate(res.field, config.task, config.sampler.build(), config.eval.instances, config.seed)
    atomic_write(ev, _report_json(report, ckpt, config.eval.instances))
    run.record(stage, [ckpt, metrics, ev])
    return report


def cmd_train(config: RunConfig, mode: str, out, init=None, log=None) -> dict[str, float]:
    if mode not in MODES:
        raise ConfigError(f"--mode must be one of {MODES}")
    run = Run(out, config)
    init = init or run.path("pretrain", "flow.bin")
    return _train_stage(run, mode, mode, init, config.sampler.build(), log)


@dataclass
class AblationRow:
    K: int
    mean_reward: float
    terminal_drift: float
    rollout_reward: float


def cmd_ablate_k(config: RunConfig, out, k_values=None, init=None, log=None) -> list[AblationRow]:
    """beautygrpo from one checkpoint for each K, evaluated with the ODE."""
    run = Run(out, config)
    init = init or run.path("pretrain", "flow.bin")
    rows = []
    for k in k_values or config.ablate.k_values:
        stage = f"ablate_k/K{k}"
        report = _train_stage(run, stage, "beautygrpo", init, config.sampler.build(K=k), log)
        tail = tail_mean(read_csv(run.path(stage, "metrics.csv")), "mean_reward")
        rows.append(AblationRow(k, report["mean_reward"], report["terminal_drift"], tail))
    table = run.path("ablate_k", "ablate_k.csv")
    write_csv(table, ["K", "mean_reward", "terminal_drift", "rollout_reward"], (list(asdict(r).values()) for r in rows))
    run.record("ablate_k", [table])
    return rows


def ablation_verdict(rows: list[AblationRow], tolerance: float) -> dict[str, bool]:
    by_k = {r.K: r.mean_reward for r in rows}
    if not {1, 3, 5} <= set(by_k):
        raise ValueError("ablation verdict needs K = 1, 3 and 5")
    return {
        "k3_within_band_of_k5": abs(by_k[3] - by_k[5]) <= tolerance,
        "k3_at_least_k1": by_k[3] >= by_k[1],
        "k5_at_least_k1": by_k[5] >= by_k[1],
    }


# ---------------------------------------------------------------------------
# compare


def tail_mean(rows: list[dict[str, str]], column: str, frac: float = 0.1) -> float:
    """Mean of ``column`` over the last ``frac`` of iterations (at least one)."""
    if not rows:
        return float("nan")
    k = max(1, int(round(frac * len(rows))))
    return float(np.mean([float(r[column]) for r in rows[-k:]]))


COMPARE_COLUMNS = ["run", "stage", "mode", "iterations", "mean_reward", "terminal_drift", "rollout_reward", "rollout_drift"]


def _stages(run_dir: Path) -> list[Path]:
    return sorted(p.parent for p in run_dir.rglob("metrics.csv"))


def cmd_compare(run_dirs, out, svg: bool = True) -> list[dict]:
    rows, curves = [], {}
    for rd in map(Path, run_dirs):
        if not rd.is_dir():
            raise MissingArtifactError(f"run directory {rd} not found")
        stages = _stages(rd)
        if not stages:
            raise MissingArtifactError(f"{rd} holds no training stage (no metrics.csv)")
        for st in stages:
            metrics = read_csv(st / "metrics.csv")
            ev = json.loads(_require(st / "eval.json").read_text())
            name = st.relative_to(rd).as_posix()
            rows.append({
                "run": rd.name,
                "stage": name,
                "mode": metrics[0]["mode"] if metrics else "",
                "iterations": len(metrics),
                "mean_reward": ev["mean_reward"],
                "terminal_drift": ev["terminal_drift"],
                "rollout_reward": tail_mean(metrics, "mean_reward"),
                "rollout_drift": tail_mean(metrics, "mean_terminal_drift"),
            })
            label = f"{rd.name}/{name}"
            it = [float(r["iteration"]) for r in metrics]
            curves[label] = (it, [float(r["mean_reward"]) for r in metrics], [float(r["mean_terminal_drift"]) for r in metrics])
    out = Path(out)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, ([r[c] for c in COMPARE_COLUMNS] for r in rows))
    if svg and curves:
        atomic_write(out / "reward.svg", line_chart({k: (v[0], v[1]) for k, v in curves.items()},
                                                    "Mean rollout reward", "iteration", "reward"))
        atomic_write(out / "drift.svg", line_chart({k: (v[0], v[2]) for k, v in curves.items()},
                                                   "Mean terminal drift", "iteration", "drift to anchor"))
    return rows
