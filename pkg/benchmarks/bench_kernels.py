"""Compiled vs NumPy kernels: micro-benchmarks plus one end-to-end rollout.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from anchorflow import _backend
from anchorflow.dpg import sample_guided
from anchorflow.flow import FlowField, flow_match_loss, draw_batch
from anchorflow.rng import Rng
from anchorflow.sampler import SamplerConfig, sample_sde
from anchorflow.task import TaskSpec, make_batch


def cases():
    spec = TaskSpec()
    flow = FlowField.init(8, 8, Rng(1))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((256, 64))
    w, b = rng.standard_normal((64, 64)), rng.standard_normal(64)
    y = np.tanh(x @ w.T + b)
    g = rng.standard_normal((256, 64))
    inst = make_batch(spec, Rng(2), 256)
    x_T = Rng(3).normal((256, 8))
    batch = draw_batch(spec, 128, Rng(4))
    cfg = SamplerConfig()

    def k():
        return _backend.kernels

    return {
        "uniforms 1e6": lambda: k().uniforms(12345, 1_000_000),
        "normals 1e6": lambda: k().normals(12345, 1_000_000),
        "dense_forward 256x64x64": lambda: k().dense_forward(x, w, b, True),
        "dense_backward 256x64x64": lambda: k().dense_backward(x, w, y, g, True),
        "flow-matching step (batch 128)": lambda: flow_match_loss(flow, batch),
        "sde rollout 256 x T=10": lambda: sample_sde(flow, x_T, inst.x_in, cfg, [Rng(5).split(j) for j in range(256)]),
        "guided rollout 256 x T=10": lambda: sample_guided(
            flow, x_T, inst.x_in, inst.anchor, cfg, [Rng(5).split(j) for j in range(256)]
        ),
    }


def bench(repeat: int) -> dict[str, dict[str, float]]:
    available = ["python"]
    try:
        _backend.use("compiled")
        available.append("compiled")
    except ImportError:
        print("compiled kernels not built; timing the fallback only", file=sys.stderr)
    results: dict[str, dict[str, float]] = {}
    for name in available:
        _backend.use(name)
        for label, fn in cases().items():
            fn()  # warm-up
            n, _ = timeit.Timer(fn).autorange()
            best = min(timeit.repeat(fn, number=n, repeat=repeat)) / n
            results.setdefault(label, {})[name] = best
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    res = bench(args.repeat)
    print(f"{'kernel':34s} {'python ms':>11s} {'compiled ms':>12s} {'speedup':>8s}")
    for label, t in res.items():
        py, co = t["python"] * 1e3, t.get("compiled", float("nan")) * 1e3
        print(f"{label:34s} {py:11.3f} {co:12.3f} {py / co:8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
