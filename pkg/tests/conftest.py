import sys

import numpy as np
import pytest

from anchorflow.flow import FlowField, pretrain
from anchorflow.nn import Layer, MlpParams
from anchorflow.rng import Rng
from anchorflow.task import TaskSpec


def fd_grad(f, theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at flat ``theta``."""
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel, floor=1e-3):
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)
    assert err.max() < rel, f"max rel err {err.max():.3g} at {err.argmax()}"


def linear_params(w, b) -> MlpParams:
    return MlpParams([Layer(np.array(w, dtype=float), np.array(b, dtype=float))])


@pytest.fixture(scope="session")
def spec():
    return TaskSpec()


@pytest.fixture(scope="session")
def pretrained(spec):
    """Default-task field after a short fixed-seed pretraining run."""
    flow = FlowField.init(spec.state_dim, spec.state_dim, Rng(11))
    return pretrain(flow, spec, 2000, 128, Rng(12)).field


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
