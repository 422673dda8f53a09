"""Command-line entry point: ``anchorflow <command> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, _backend
from . import config as cfgmod
from .errors import AnchorflowError, ConfigError
from .grpo import MODES
from .pipeline import ablation_verdict, cmd_ablate_k, cmd_compare, cmd_eval, cmd_pretrain, cmd_train


def _common(p: argparse.ArgumentParser, out_default: str | None = "runs/default") -> None:
    p.add_argument("--config", type=Path, help="TOML run config (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set grpo.lr=5e-4 (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress lines on stderr")
    if out_default is not None:
        p.add_argument("--out", type=Path, default=Path(out_default), help="run directory (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anchorflow", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({_backend.NAME} kernels)")
    ap.add_argument("--dump-defaults", action="store_true", help="print the documented default config and exit")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("pretrain", help="flow-matching pretraining")
    _common(p)

    p = sub.add_parser("train", help="GRPO fine-tuning from the pretrained checkpoint")
    _common(p)
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--init", type=Path, help="starting checkpoint (default: <out>/pretrain/flow.bin)")

    p = sub.add_parser("eval", help="ODE-only evaluation of a checkpoint")
    _common(p, out_default=None)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="run directory to store the report in")

    p = sub.add_parser("compare", help="consolidate training runs into CSV and SVG")
    p.add_argument("runs", nargs="+", type=Path, help="run directories")
    p.add_argument("--out", type=Path, default=Path("runs/compare"))
    p.add_argument("--no-svg", action="store_true")

    p = sub.add_parser("ablate-k", help="beautygrpo for several K, evaluated with the ODE")
    _common(p)
    p.add_argument("--k", type=int, nargs="+", help="K values (default: config ablate.k_values)")
    p.add_argument("--init", type=Path, help="starting checkpoint (default: <out>/pretrain/flow.bin)")
    return ap


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.RunConfig()
    cfg = cfgmod.apply_overrides(cfg, getattr(args, "overrides", []))
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a u64")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.dump_defaults:
        sys.stdout.write(cfgmod.dumps(cfgmod.RunConfig()))
        return 0
    if args.command is None:
        ap.print_help(sys.stderr)
        return 2
    log = None if getattr(args, "quiet", False) else (lambda msg: print(msg, file=sys.stderr, flush=True))

    if args.command == "compare":
        rows = cmd_compare(args.runs, args.out, svg=not args.no_svg)
        for r in rows:
            print(f"{r['run']}/{r['stage']}: mean_reward {r['mean_reward']:+.6f}  terminal_drift {r['terminal_drift']:.5f}")
        return 0

    cfg = resolve_config(args)
    if args.command == "pretrain":
        print(cmd_pretrain(cfg, args.out))
    elif args.command == "train":
        print(json.dumps(cmd_train(cfg, args.mode, args.out, args.init, log), indent=2))
    elif args.command == "eval":
        print(json.dumps(cmd_eval(cfg, args.checkpoint, args.out), indent=2))
    elif args.command == "ablate-k":
        rows = cmd_ablate_k(cfg, args.out, args.k, args.init, log)
        for r in rows:
            print(f"K={r.K}: mean_reward {r.mean_reward:+.6f}  terminal_drift {r.terminal_drift:.5f}")
        if {1, 3, 5} <= {r.K for r in rows}:
            for name, ok in ablation_verdict(rows, cfg.ablate.tolerance).items():
                print(f"{name}: {'yes' if ok else 'no'}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except AnchorflowError as exc:
        print(f"anchorflow: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
