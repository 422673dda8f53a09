import os
import subprocess
import sys

import numpy as np
import pytest

from anchorflow import _backend, _fallback
from anchorflow.dpg import sample_guided
from anchorflow.flow import FlowField
from anchorflow.rng import Rng
from anchorflow.sampler import SamplerConfig
from anchorflow.task import TaskSpec, make_batch

compiled = pytest.importorskip("anchorflow._kernels")


@pytest.fixture
def restore_backend():
    name = _backend.NAME
    yield
    _backend.use(name)


def test_rng_streams_identical():
    for state in (0, 1, 2**63 + 5, 2**64 - 1):
        a, sa = compiled.uniforms(state, 1001)
        b, sb = _fallback.uniforms(state, 1001)
        assert sa == sb and a.tobytes() == b.tobytes()
        a, sa = compiled.normals(state, 1001)
        b, sb = _fallback.normals(state, 1001)
        assert sa == sb
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


@pytest.mark.parametrize("tanh", [True, False])
def test_dense_kernels_agree(tanh):
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((33, 17)), rng.standard_normal((9, 17)), rng.standard_normal(9)
    y1, y2 = compiled.dense_forward(x, w, b, tanh), _fallback.dense_forward(x, w, b, tanh)
    np.testing.assert_allclose(y1, y2, rtol=1e-13, atol=1e-13)
    g = rng.standard_normal((33, 9))
    for a, c in zip(compiled.dense_backward(x, w, y2, g, tanh), _fallback.dense_backward(x, w, y2, g, tanh)):
        np.testing.assert_allclose(np.asarray(a), c, rtol=1e-12, atol=1e-12)


def test_rollouts_agree_across_backends(restore_backend):
    spec = TaskSpec()
    flow = FlowField.init(8, 8, Rng(1))
    inst = make_batch(spec, Rng(2), 16)
    out = {}
    for name in ("python", "compiled"):
        _backend.use(name)
        out[name] = sample_guided(flow, Rng(3).normal((16, 8)), inst.x_in, inst.anchor, SamplerConfig(),
                                  [Rng(4).split(j) for j in range(16)])
    np.testing.assert_allclose(out["python"].states, out["compiled"].states, rtol=0, atol=1e-12)
    assert np.array_equal(out["python"].stochastic, out["compiled"].stochastic)


def test_env_var_forces_fallback():
    code = "from anchorflow import _backend; print(_backend.NAME)"
    env = dict(os.environ, ANCHORFLOW_PURE="1")
    got = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert got.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        _backend.use("fortran")
