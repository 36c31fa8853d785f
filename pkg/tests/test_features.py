import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadelab import features as F
from cascadelab.trace import PredictionTrace

from conftest import random_trace


def make_trace(rows, gates=None, argmax=None, probs=None, final=7, gt=None, second=None):
    """Trace from raw attention rows [L, H, k] (scaled by gates) with simple defaults."""
    rows = np.asarray(rows, dtype=np.float64)
    L, H, k = rows.shape
    gates = np.ones((L, H)) if gates is None else np.asarray(gates, dtype=np.float64)
    argmax = np.full(L, final) if argmax is None else np.asarray(argmax)
    probs = np.full(L, 0.5) if probs is None else np.asarray(probs)
    second = np.zeros(L) if second is None else np.asarray(second)
    return PredictionTrace(
        query_pos=k - 1,
        context_len=k + 1,
        final_pred=final,
        ground_truth=gt,
        layer_probs=probs.astype(np.float32),
        layer_argmax=argmax.astype(np.int64),
        layer_second_prob=second.astype(np.float32),
        attn_rows=(rows * gates[..., None]).astype(np.float32),
        raw_attn_rows=rows.astype(np.float32),
        gate_means=gates.astype(np.float32),
        raw_activation=np.zeros(4, dtype=np.float32),
    )


def uniform_rows(L=6, H=6, k=4):
    return np.full((L, H, k), 1.0 / k)


# ---------------------------------------------------------------------- dimensions and golden layout


def test_dimensions():
    assert F.tier_dim("t1") == 5
    assert F.tier_dim("t2") == 163
    assert F.tier_dim("t2p") == 167
    assert F.tier_dim("topk") == 455
    tr = random_trace(np.random.default_rng(0))
    assert F.tier1(tr).shape == (5,)
    assert F.tier2(tr).shape == (163,)
    assert F.tier2(tr, include_position=True).shape == (167,)
    assert F.topk_features(tr).shape == (455,)


RAW = np.array([0.1, 0.2, 0.3, 0.4])
GATES = np.array([0.05, 0.25, 0.4, 0.55, 0.7, 0.85])
ENT = -float(np.sum(RAW * np.log(RAW)))


@pytest.fixture
def golden_trace():
    rows = np.broadcast_to(RAW, (6, 6, 4)).copy()
    gates = np.broadcast_to(GATES, (6, 6)).copy()
    return make_trace(
        rows,
        gates,
        argmax=[2, 7, 7, 3, 7, 7],
        probs=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        second=[0.05, 0.05, 0.1, 0.1, 0.2, 0.2],
        final=7,
        gt=7,
    )


def test_golden_tier2_layout(golden_trace):
    exp = np.zeros(167)
    exp[0:6] = [0.0, 0.2, 0.3, 0.0, 0.5, 0.6]  # traj_prob
    exp[6:12] = [-0.05, 0.15, 0.2, -0.1, 0.3, 0.4]  # traj_margin
    exp[12:17] = [0.0, 0.0, 0.3, 0.0, 0.0]  # traj_drops
    exp[17] = 4  # k*
    exp[18] = 2  # kappa
    act = 0.4 * GATES
    ent = np.where(act < 0.1, 0.0, ENT)
    exp[43:49] = act  # head_act_stable, layer 4 slice of 19..54
    exp[85:91] = act  # head_act_final, layer 5 slice of 55..90
    exp[115:121] = ent  # head_ent_stable, layer 4 slice of 91..126
    exp[157:163] = ent  # head_ent_final, layer 5 slice of 127..162
    exp[163] = 1.0  # attn_span_stable
    exp[164] = 1.0  # attn_span_final
    exp[165] = 0.6 * GATES.sum()  # local_mass_stable
    exp[166] = 0.6 * GATES.sum()  # local_mass_final
    got = F.tier2(golden_trace, include_position=True)
    np.testing.assert_allclose(got, exp, atol=1e-6)
    np.testing.assert_array_equal(F.tier2(golden_trace), got[:163])


def test_golden_topk_layout(golden_trace):
    exp = np.zeros(455)
    t2 = F.tier2(golden_trace, include_position=True)
    exp[0:19] = t2[0:19]
    vals = np.outer(GATES, [0.4, 0.3, 0.2, 0.1, 0.0])
    vals[0] = 0.0  # ghost head (gate mean 0.05)
    exp[139:169] = vals.ravel()  # top-k at k*=4: 19 + 4*30
    exp[349:379] = vals.ravel()  # top-k at layer 5: 199 + 5*30
    exp[379:415] = t2[91:127]
    exp[415:451] = t2[127:163]
    exp[451:455] = t2[163:167]
    np.testing.assert_allclose(F.topk_features(golden_trace), exp, atol=1e-6)


def test_golden_tier1(golden_trace):
    groups = F.HeadGroups()
    exp = [4, 0.6, 0.4 * (GATES[2] + GATES[3]), 0.4 * (GATES[4] + GATES[5]), 1.0]
    np.testing.assert_allclose(F.tier1(golden_trace, groups), exp, atol=1e-6)


# ---------------------------------------------------------------------- components


def test_trajectory_examples():
    tr = make_trace(uniform_rows(), probs=[0.5] * 6)
    assert np.all(F.trajectory(tr)[2] == 0.0)
    tr = make_trace(uniform_rows(), argmax=[7, 7, 3, 7, 7, 7])
    assert F.trajectory(tr)[0][2] == 0.0
    tr = make_trace(uniform_rows(L=2), probs=[0.6, 0.4])
    assert F.trajectory(tr)[2][0] == pytest.approx(0.2)


def test_stability_examples():
    assert F.stability(make_trace(uniform_rows())) == (0, 6)
    assert F.stability(make_trace(uniform_rows(), argmax=[1, 1, 1, 1, 1, 7]))[0] == 5
    tr = make_trace(uniform_rows(), argmax=[7, 7, 2, 7, 7, 7], gt=7)
    assert F.stability(tr) == (3, 3)
    tr = make_trace(uniform_rows(), argmax=[5, 5, 5, 5, 2, 7], gt=5)
    assert F.stability(tr) == (5, 4)


def test_head_activation_examples():
    rows = uniform_rows(k=1)
    gates = np.full((6, 6), 0.7)
    gates[0, 3] = 0.0
    tr = make_trace(rows, gates)
    assert F.head_activation(tr, 0)[0] == pytest.approx(0.7)
    assert F.head_activation(tr, 0)[3] == 0.0
    r = np.zeros((6, 6, 3))
    r[:] = [0.1, 0.3, 0.2]
    a = F.head_activation(make_trace(r), 2)
    r[:] = [0.3, 0.2, 0.1]
    assert np.array_equal(a, F.head_activation(make_trace(r), 2))
    assert a[0] == pytest.approx(0.3)


def test_entropy_examples():
    r = np.zeros((6, 6, 5))
    r[..., 2] = 1.0
    assert np.all(F.head_entropy(make_trace(r), 1) == 0.0)
    assert F.head_entropy(make_trace(uniform_rows(k=5)), 1) == pytest.approx(np.full(6, math.log(5)))
    tr = make_trace(uniform_rows(k=1), np.full((6, 6), 0.05))
    assert np.all(F.head_entropy(tr, 0) == 0.0)


def test_ghost_rule_exact_zero():
    r = np.zeros((6, 6, 4))
    r[:] = [0.05, 0.05, 0.05, 0.05]  # peak 0.05 with a spread pattern
    tr = make_trace(r / r.sum(-1, keepdims=True), np.full((6, 6), 0.2))
    assert np.all(F.head_activation(tr, 5) == np.float32(0.05))
    assert np.all(F.head_entropy(tr, 5) == 0.0)


def test_position_examples():
    r = np.zeros((6, 6, 6))
    r[..., 4] = 1.0  # key tq - 1 with tq = 5
    span, local = F.position_features(make_trace(r, np.full((6, 6), 0.5)), 3)
    assert span == pytest.approx(1.0)
    assert local == pytest.approx(3.0)
    r = np.zeros((6, 6, 12))
    r[..., 11 - 2] = 0.5
    r[..., 11 - 10] = 0.5
    assert F.position_features(make_trace(r), 0)[0] == pytest.approx(6.0)
    tr = make_trace(uniform_rows(), np.zeros((6, 6)))
    assert F.position_features(tr, 0) == (0.0, 0.0)


def test_tier1_examples():
    tr = make_trace(uniform_rows(k=1), probs=[1.0] * 6)
    t1 = F.tier1(tr)
    assert t1[0] == 0 and t1[1] == 1.0
    gates = np.ones((6, 6))
    gates[5, 2] = gates[5, 3] = 0.0
    gates[5, 4] = gates[5, 5] = 0.4
    t1 = F.tier1(make_trace(uniform_rows(k=1), gates))
    assert t1[2] == 0.0 and t1[3] == pytest.approx(0.8)


def test_tier2_examples():
    tr = make_trace(uniform_rows(), argmax=[1, 1, 7, 7, 7, 7])
    v = F.tier2(tr)
    assert v[17] == 2
    block = v[19:55].reshape(6, 6)
    assert np.all(block[[0, 1, 3, 4, 5]] == 0.0) and np.all(block[2] > 0)


def test_topk_examples():
    r = np.zeros((6, 6, 3))
    r[:] = [0.05, 0.9, 0.05]
    tr = make_trace(r)
    tk = F.topk_values(tr, 1)
    np.testing.assert_allclose(tk[0], [0.9, 0.05, 0.05, 0, 0], atol=1e-7)
    assert np.array_equal(tk[:, 0], F.head_activation(tr, 1))
    gates = np.full((6, 6), 0.09)
    assert np.all(F.topk_values(make_trace(r, gates), 1) == 0.0)


def test_unknown_tier():
    with pytest.raises(ValueError):
        F.extract([], "t9")
    with pytest.raises(ValueError):
        F.HeadGroups(anchor=((6, 0),)).validate(6, 6)


# ---------------------------------------------------------------------- properties


def _permuted(tr: PredictionTrace, perm: np.ndarray) -> PredictionTrace:
    return dataclasses.replace(tr, attn_rows=tr.attn_rows[..., perm], raw_attn_rows=tr.raw_attn_rows[..., perm])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    tr = random_trace(rng)
    perm = rng.permutation(tr.query_pos + 1)
    assert np.array_equal(F.tier2(tr), F.tier2(_permuted(tr, perm)))
    a, b = F.topk_features(tr), F.topk_features(_permuted(tr, perm))
    assert np.array_equal(a[:-4], b[:-4])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_entropy_bounds_and_topk_monotone(seed):
    rng = np.random.default_rng(seed)
    tr = random_trace(rng)
    for l in range(6):
        e = F.head_entropy(tr, l)
        assert np.all(e >= 0) and np.all(e <= math.log(tr.query_pos + 1) + 1e-9)
        tk = F.topk_values(tr, l)
        assert np.all(np.diff(tk, axis=1) <= 0) and np.all(tk >= 0)


def test_token_identity_independence(rng):
    tr = random_trace(rng)
    relabel = dataclasses.replace(
        tr,
        final_pred=tr.final_pred + 100,
        layer_argmax=tr.layer_argmax + 100,
        ground_truth=None if tr.ground_truth is None else tr.ground_truth + 100,
        seq_id=999,
    )
    for tier in F.TIERS:
        assert np.array_equal(F.extract([tr], tier), F.extract([relabel], tier))


def test_matrix_round_trip(rng, tmp_path):
    traces = [random_trace(rng) for _ in range(5)]
    fm = F.FeatureMatrix("t2p", F.extract(traces, "t2p").astype(np.float32), F.trace_index(traces))
    F.write_matrix(tmp_path / "f.bin", fm)
    back = F.read_matrix(tmp_path / "f.bin")
    assert back.tier == "t2p" and back.index == fm.index
    assert np.array_equal(back.values, fm.values)
    blob = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(blob[:-3])
    with pytest.raises(ValueError):
        F.read_matrix(tmp_path / "f.bin")
