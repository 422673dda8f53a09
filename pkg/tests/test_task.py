import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorflow.errors import DimensionError
from anchorflow.nn import MlpParams
from anchorflow.rng import Rng
from anchorflow.task import (
    PreferencePair,
    RewardNet,
    TaskSpec,
    analytic_reward,
    load_pairs,
    make_batch,
    make_instance,
    make_preference_pairs,
    pairwise_loss,
    preference_label,
    preference_probability,
    reward_net_score,
    reward_terms,
    sample_data,
    save_pairs,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(state_dim=3, blemish_dims=3)
    with pytest.raises(ValueError):
        TaskSpec(gamma=-1)
    with pytest.raises(ValueError):
        TaskSpec(anchor_offset=0)
    assert TaskSpec().identity_mask.sum() == 4


def test_zero_blemish_scale():
    inst = make_instance(TaskSpec(blemish_scale=0), Rng(0))
    assert np.all(inst.x_in[:3] == 0)


def test_anchor_invariants(spec):
    inst = make_batch(spec, Rng(1), 100)
    assert np.all(inst.anchor[:, spec.blemish_slice] == 0)
    assert np.array_equal(inst.anchor[:, spec.identity_mask], inst.clean[:, spec.identity_mask])
    assert np.array_equal(inst.anchor[:, spec.identity_mask], inst.x_in[:, spec.identity_mask])
    assert np.all(inst.anchor[:, spec.tex] == pytest.approx(1.1))


def test_instance_deterministic(spec):
    a, b = make_instance(spec, Rng(5)), make_instance(spec, Rng(5))
    assert a.x_in.tobytes() == b.x_in.tobytes() and a.anchor.tobytes() == b.anchor.tobytes()


def test_instance_distribution(spec):
    inst = make_batch(spec, Rng(2), 50_000)
    assert np.std(inst.x_in[:, :3]) == pytest.approx(0.7, rel=0.02)
    assert np.std(inst.x_in[:, spec.identity_mask]) == pytest.approx(1.0, rel=0.02)
    assert np.mean(inst.x_in[:, spec.tex]) == pytest.approx(1.0, abs=0.01)


def test_reward_optimum_and_anchor(spec):
    inst = make_instance(spec, Rng(3))
    assert analytic_reward(spec, inst, inst.clean) == 0.0
    assert analytic_reward(spec, inst, inst.anchor) == pytest.approx(-0.005, abs=1e-15)
    assert spec.anchor_reward == pytest.approx(-0.005, abs=1e-15)


def test_reward_of_unedited_input(spec):
    inst = make_instance(spec, Rng(4))
    expect = -np.sum(inst.x_in[:3] ** 2) - 0.5 * (inst.x_in[-1] - 1.0) ** 2
    assert analytic_reward(spec, inst, inst.x_in) == pytest.approx(expect, abs=1e-14)


def test_reward_dim_mismatch(spec):
    with pytest.raises(DimensionError):
        analytic_reward(spec, make_instance(spec, Rng(0)), np.zeros(7))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.0, 3.0))
def test_reward_nonpositive(seed, scale):
    spec = TaskSpec()
    rng = Rng(seed)
    inst = make_instance(spec, rng)
    x = inst.clean + scale * rng.normal(8)
    r = analytic_reward(spec, inst, x)
    assert r <= 0
    if scale > 1e-3:
        assert r < 0


def test_reward_terms_weighting(spec):
    inst = make_instance(spec, Rng(6))
    x = Rng(7).normal(8)
    t = reward_terms(spec, inst, x)
    assert analytic_reward(spec, inst, x) == pytest.approx(-t["blemish"] - t["identity"] - 0.5 * t["texture"])


def test_sample_data(spec):
    inst = make_batch(spec, Rng(8), 20_000)
    x = sample_data(replace(spec, data_jitter=0.0), inst, Rng(9))
    np.testing.assert_array_equal(x[:, 3:], inst.anchor[:, 3:])
    np.testing.assert_allclose(x[:, :3], spec.data_blemish_keep * inst.x_in[:, :3])
    noisy = sample_data(spec, inst, Rng(9))
    assert np.std(noisy - x) == pytest.approx(spec.data_jitter, rel=0.02)


def test_preference_orderings(spec):
    inst = make_instance(spec, Rng(10))
    assert preference_label(spec, inst, inst.clean, inst.anchor) == 1
    big = replace(spec, blemish_scale=3.0)
    inst2 = make_instance(big, Rng(10))
    assert preference_label(big, inst2, inst2.anchor, inst2.x_in) == 1
    assert preference_label(spec, inst, inst.anchor, inst.anchor) == 0


def test_preference_pairs(spec, tmp_path):
    pairs = make_preference_pairs(spec, 200, 0.3, Rng(11))
    again = make_preference_pairs(spec, 200, 0.3, Rng(11))
    assert len(pairs) == 200
    for p, q in zip(pairs, again):
        assert p.label == q.label and p.a.tobytes() == q.a.tobytes()
    for p in pairs:
        assert p.swapped().label == -p.label
        assert p.swapped().swapped().a.tobytes() == p.a.tobytes()
    save_pairs(tmp_path / "p.jsonl", pairs)
    back = load_pairs(tmp_path / "p.jsonl")
    for p, q in zip(pairs, back):
        assert p.label == q.label and np.array_equal(p.condition, q.condition)
        assert np.array_equal(p.a, q.a) and np.array_equal(p.b, q.b)


def test_preference_labels_match_oracle(spec):
    rng = Rng(12)
    for _ in range(50):
        inst = make_instance(spec, rng)
        a, b = inst.clean + rng.normal(8), inst.clean + rng.normal(8)
        lab = preference_label(spec, inst, a, b)
        gap = analytic_reward(spec, inst, a) - analytic_reward(spec, inst, b)
        assert lab == np.sign(gap)
        assert preference_label(spec, inst, b, a) == -lab


def test_bradley_terry_values():
    assert preference_probability(1.3, 1.3) == 0.5
    assert preference_probability(math.log(3), 0.0) == pytest.approx(0.75, abs=1e-15)


def test_reward_net_zero_and_deterministic():
    net = RewardNet(MlpParams.zeros([16, 64, 64, 1]), 8)
    assert np.all(reward_net_score(net, np.ones(8), Rng(0).normal((5, 8))) == 0)
    net = RewardNet.init(8, Rng(1))
    c, x = Rng(2).normal(8), Rng(3).normal(8)
    assert reward_net_score(net, c, x) == reward_net_score(net, c, x)
    with pytest.raises(DimensionError):
        reward_net_score(net, c, np.zeros(7))


def test_pairwise_loss_gradient():
    from conftest import assert_grad_close, fd_grad

    net = RewardNet.init(2, Rng(4), hidden=5)
    rng = Rng(5)
    win, lose = rng.normal((6, 4)), rng.normal((6, 4))
    _, g = pairwise_loss(net.params, win, lose)
    num = fd_grad(lambda th: pairwise_loss(net.params.with_flat(th), win, lose, grad=False)[0], net.params.flat())
    assert_grad_close(g.flat(), num, 1e-6)
