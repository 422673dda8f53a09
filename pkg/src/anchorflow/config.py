"""Run configuration: a two-level TOML tree with documented defaults.

Every run is described by one :class:`RunConfig`.  Files are TOML with one
table per sub-config; any key may be overridden from the command line as
``--set section.key=value``.  Unknown keys are errors, never ignored.
"""
from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .grpo import GrpoConfig
from .sampler import NoiseSchedule, SamplerConfig
from .task import TaskSpec

REWARD_SOURCES = ("analytic", "learned")


@dataclass(frozen=True)
class SamplerSection:
    T: int = 10
    eta: float = 0.7
    K: int = 3
    t_eps: float = 0.1
    lambda_max: float = 0.95

    def build(self, K: int | None = None) -> SamplerConfig:
        return SamplerConfig(self.T, NoiseSchedule(self.eta, self.t_eps), self.K if K is None else K, self.lambda_max)


@dataclass(frozen=True)
class GrpoSection:
    group_size: int = 8
    clip_eps: float = 0.2
    iterations: int = 300
    conditions_per_batch: int = 32
    lr: float = 1e-3
    lr_decay: str = "linear"
    eps_std: float = 1e-8
    inner_epochs: int = 1
    max_grad_norm: float = 0.0

    def build(self) -> GrpoConfig:
        return GrpoConfig(
            clip_eps=self.clip_eps,
            group_size=self.group_size,
            iterations=self.iterations,
            conditions_per_batch=self.conditions_per_batch,
            eps_std=self.eps_std,
            lr=self.lr,
            inner_epochs=self.inner_epochs,
            max_grad_norm=self.max_grad_norm or None,
            lr_decay=self.lr_decay,
        )


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 4000
    batch_size: int = 128
    lr: float = 1e-3

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps and batch_size must be >= 1 and lr > 0")


@dataclass(frozen=True)
class RewardNetSection:
    pairs: int = 5000
    epochs: int = 50
    candidate_noise: float = 0.7
    lr: float = 1e-3
    batch_size: int = 128
    heldout: float = 0.2
    hidden: int = 64

    def __post_init__(self):
        if self.pairs < 1 or self.epochs < 1 or not 0 <= self.heldout < 1:
            raise ValueError("pairs, epochs >= 1 and heldout in [0, 1)")


@dataclass(frozen=True)
class EvalSection:
    instances: int = 500

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("instances must be >= 1")


@dataclass(frozen=True)
class AblateSection:
    k_values: tuple[int, ...] = (1, 3, 5)
    # |reward(K=3) - reward(K=5)| allowed, in reward units
    tolerance: float = 0.002

    def __post_init__(self):
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ValueError("k_values must be a non-empty list of positive ints")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")


SECTIONS = {
    "task": TaskSpec,
    "sampler": SamplerSection,
    "grpo": GrpoSection,
    "pretrain": PretrainSection,
    "reward_net": RewardNetSection,
    "eval": EvalSection,
    "ablate": AblateSection,
}

DOCS = {
    "seed": "master seed; every random stream derives from it",
    "reward": "reward used by RL: 'analytic' oracle or 'learned' Bradley-Terry net",
    "task.state_dim": "state dimension D",
    "task.blemish_dims": "leading coordinates that hold blemish",
    "task.texture_index": "texture coordinate (negative counts from the end)",
    "task.texture_target": "ideal texture value",
    "task.anchor_offset": "relative texture overshoot of the anchor",
    "task.alpha": "blemish weight",
    "task.beta": "identity weight",
    "task.gamma": "texture weight",
    "task.blemish_scale": "std of input blemish",
    "task.texture_noise": "std of input texture around the target",
    "task.data_blemish_keep": "fraction of blemish left in pretraining data",
    "task.data_jitter": "isotropic noise on pretraining data",
    "task.data_seed": "seed of the preference-pair set",
    "sampler.T": "reverse steps",
    "sampler.eta": "noise level",
    "sampler.K": "guided stochastic steps per trajectory (beautygrpo)",
    "sampler.t_eps": "time clamp inside the noise schedule",
    "sampler.lambda_max": "upper clamp on the guidance weight",
    "grpo.group_size": "trajectories per condition",
    "grpo.clip_eps": "likelihood-ratio clip",
    "grpo.iterations": "RL iterations",
    "grpo.conditions_per_batch": "conditions per iteration",
    "grpo.lr": "Adam learning rate",
    "grpo.lr_decay": "'linear' (to zero) or 'constant'",
    "grpo.eps_std": "advantage guard on the group reward std",
    "grpo.inner_epochs": "gradient steps per rollout batch",
    "grpo.max_grad_norm": "gradient clip; 0 disables",
    "pretrain.steps": "flow-matching Adam steps",
    "pretrain.batch_size": "samples per step",
    "pretrain.lr": "Adam learning rate",
    "reward_net.pairs": "preference pairs generated",
    "reward_net.epochs": "training epochs",
    "reward_net.candidate_noise": "perturbation scale of random candidates",
    "reward_net.lr": "Adam learning rate",
    "reward_net.batch_size": "pairs per minibatch",
    "reward_net.heldout": "fraction of pairs held out for accuracy",
    "reward_net.hidden": "hidden width",
    "eval.instances": "fresh conditions per ODE evaluation",
    "ablate.k_values": "K values compared by ablate-k",
    "ablate.tolerance": "allowed mean-reward gap between K=3 and K=5",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    reward: str = "analytic"
    task: TaskSpec = field(default_factory=TaskSpec)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    reward_net: RewardNetSection = field(default_factory=RewardNetSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"]["k_values"] = list(d["ablate"]["k_values"])
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# TOML rendering


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {type(v).__name__}")


def dumps(config: RunConfig, comments: bool = True) -> str:
    d = config.to_dict()
    lines = []

    def emit(key, value, path):
        doc = DOCS.get(path)
        lines.append(f"{key} = {_toml_value(value)}" + (f"  # {doc}" if comments and doc else ""))

    for key in ("seed", "reward"):
        emit(key, d[key], key)
    for section in SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in d[section].items():
            emit(key, value, f"{section}.{key}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing


def _key_line(text: str | None, section: str | None, key: str) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or the root table)."""
    if text is None:
        return None
    current = None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for n, line in enumerate(text.splitlines(), 1):
        head = re.match(r"^\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            continue
        if current == section and pat.match(line):
            return n
    return None


def _where(source: str, text: str | None, section: str | None, key: str) -> str:
    name = f"{section}.{key}" if section else key
    line = _key_line(text, section, key)
    return f"{source}:{line}: key '{name}'" if line else f"{source}: key '{name}'"


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(data: dict, source: str = "<config>", text: str | None = None, base: RunConfig | None = None) -> RunConfig:
    """Merge ``data`` over ``base`` (defaults if omitted) with strict checking."""
    base = base or RunConfig()
    top = {}
    sections = {}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{_where(source, text, None, key)}: expected a table")
            sections[key] = value
        elif key in ("seed", "reward"):
            top[key] = _coerce(value, getattr(RunConfig(), key), _where(source, text, None, key))
        else:
            raise ConfigError(f"{_where(source, text, None, key)}: unknown key")
    if "seed" in top and not 0 <= top["seed"] < 2**64:
        raise ConfigError(f"{_where(source, text, None, 'seed')}: seed must be a u64")
    if "reward" in top and top["reward"] not in REWARD_SOURCES:
        raise ConfigError(f"{_where(source, text, None, 'reward')}: must be one of {REWARD_SOURCES}")
    out = {}
    for name, table in sections.items():
        current = getattr(base, name)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        updates = {}
        for key, value in table.items():
            where = _where(source, text, name, key)
            if key not in known:
                raise ConfigError(f"{where}: unknown key")
            updates[key] = _coerce(value, known[key], where)
        try:
            out[name] = replace(current, **updates)
        except ValueError as exc:
            bad = next(iter(updates), "")
            raise ConfigError(f"{_where(source, text, name, bad)}: {exc}") from None
    cfg = replace(base, **top, **out)
    validate(cfg, source, text, sections)
    return cfg


def validate(cfg: RunConfig, source: str = "<config>", text: str | None = None, given: dict | None = None) -> None:
    """Checks that span several keys, reported against the first key given."""
    checks = [
        ("sampler", cfg.sampler.build),
        ("grpo", cfg.grpo.build),
        ("ablate", lambda: [cfg.sampler.build(K=k) for k in cfg.ablate.k_values]),
    ]
    for section, check in checks:
        try:
            check()
        except ValueError as exc:
            keys = list((given or {}).get(section, {}))
            key = keys[0] if keys else "*"
            raise ConfigError(f"{_where(source, text, section, key)}: {exc}") from None


def loads(text: str, source: str = "<string>", base: RunConfig | None = None) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return from_dict(data, source, text, base)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return loads(path.read_text(encoding="utf-8"), str(path))


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b=value`` with ``value`` read as a TOML scalar or bare string."""
    if "=" not in item:
        raise ConfigError(f"--set {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    path = key.strip().split(".")
    if not all(path) or len(path) > 2:
        raise ConfigError(f"--set {item!r}: key must be 'name' or 'section.name'")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(cfg: RunConfig, items: list[str]) -> RunConfig:
    for item in items:
        path, value = parse_override(item)
        data = {path[0]: value} if len(path) == 1 else {path[0]: {path[1]: value}}
        cfg = from_dict(data, f"--set {item}", None, cfg)
    return cfg
