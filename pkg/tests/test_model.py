import numpy as np
import pytest

from cascadelab.model import (
    DualStreamTransformer,
    InterventionSpec,
    ModelConfig,
    init_params,
    pls_loss,
    pls_weights,
)
from cascadelab.tensor import Graph, Tensor, finite_difference_check

from conftest import TINY, small_config, tiny_model


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(pls_lambda=-0.1)
    with pytest.raises(ValueError):
        ModelConfig(mode="single")
    assert ModelConfig().d_head == 64


# ---------------------------------------------------------------------- embedding


def test_embed_init_streams():
    m = tiny_model(positional="none")
    st = m.embed_init(Graph(record=False), np.array([[3, 3, 7]]))
    assert np.all(st.x_e.data == 0.0)
    np.testing.assert_array_equal(st.x_t.data[0, 0], st.x_t.data[0, 1])


def test_embed_init_direct_lookup():
    m = tiny_model(positional="none")
    m.params["wte"].data[0] = 1.0
    st = m.embed_init(Graph(record=False), np.array([[0, 1]]))
    np.testing.assert_array_equal(st.x_t.data[0, 0], np.ones(TINY.d_model))


def test_embed_init_learned_positions_add_to_token_stream():
    m = tiny_model()
    st = m.embed_init(Graph(record=False), np.array([[3, 3]]))
    np.testing.assert_allclose(st.x_t.data[0, 1] - st.x_t.data[0, 0], m.params["wpe"].data[1] - m.params["wpe"].data[0])
    assert np.all(st.x_e.data == 0.0)


def test_embed_init_bad_id_names_position():
    with pytest.raises(IndexError, match="position"):
        tiny_model().embed_init(Graph(record=False), np.array([[1, 2, 20]]))


# ---------------------------------------------------------------------- gated attention


def _zero_gate(m):
    for l in range(m.config.n_layers):
        m.params[f"h.{l}.attn.wg"].data[:] = 0.0
        m.params[f"h.{l}.attn.bg"].data[:] = 0.0


def test_zero_gate_weights_give_half_gates(rng):
    m = tiny_model()
    _zero_gate(m)
    out = m.forward(rng.integers(0, 20, size=(2, 6)))
    for rec in out.records:
        np.testing.assert_allclose(rec.gate_mean, 0.5, atol=1e-12)
        np.testing.assert_allclose(rec.attn_eff.sum(-1), 0.5, atol=1e-6)


def test_large_negative_gate_bias_disables_head(rng):
    m = tiny_model()
    m.params["h.0.attn.bg"].data[1] = -1e3
    out = m.forward(rng.integers(0, 20, size=(1, 6)))
    assert np.abs(out.head_outputs[0].data[:, 1]).max() < 1e-12


def test_single_token_attends_to_itself():
    out = tiny_model().forward(np.array([[4]]))
    for rec in out.records:
        np.testing.assert_array_equal(rec.attn[..., 0, 0], 1.0)


def test_gated_row_sums(rng):
    m = DualStreamTransformer(small_config(), seed=3)
    out = m.forward(rng.integers(0, 40, size=(3, 12)))
    for rec in out.records:
        np.testing.assert_allclose(rec.attn.sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(rec.attn_eff.sum(-1), rec.gate_mean, atol=1e-6)
        assert rec.attn_eff.sum(-1).max() <= 1.0 + 1e-6


# ---------------------------------------------------------------------- layer forward


def test_cascade_token_stream_frozen(rng):
    m = DualStreamTransformer(small_config(), seed=1)
    out = m.forward(rng.integers(0, 40, size=(2, 10)))
    for st in out.states[1:]:
        assert np.array_equal(st.x_t.data, out.states[0].x_t.data)


def test_zero_weights_leave_contextual_stream_unchanged(rng):
    cfg = TINY.replace(positional="none")
    params = {k: np.zeros_like(v) for k, v in init_params(cfg, 0, np.float64).items()}
    params["wte"] = rng.normal(size=params["wte"].shape)
    for l in range(cfg.n_layers):
        for ln in ("ln1", "ln2"):
            params[f"h.{l}.{ln}.g"][:] = 1.0
    params["ln_f.g"][:] = 1.0
    m = DualStreamTransformer(cfg, params, dtype=np.float64)
    g = Graph(record=False)
    st0 = m.embed_init(g, np.array([[1, 2, 3]]))
    st1, _, _ = m.layer_forward(g, st0, 0)
    assert np.array_equal(st1.x_e.data, st0.x_e.data)
    assert np.array_equal(st1.x_t.data, st0.x_t.data)


def test_dual_standard_routes_attention_to_token_stream(rng):
    m = tiny_model(mode="dual_standard")
    g = Graph(record=False)
    st0 = m.embed_init(g, rng.integers(0, 20, size=(1, 5)))
    st0.x_e = Tensor(rng.normal(size=st0.x_e.shape))
    st1, _, _ = m.layer_forward(g, st0, 0)
    x = st0.x_t.data + st0.x_e.data
    a, _, _ = m.gated_attention(g, m._ln(g, Tensor(x), "h.0.ln1"), 0)
    f = m.ffn(g, m._ln(g, Tensor(x + a.data), "h.0.ln2"), 0)
    np.testing.assert_allclose(st1.x_t.data, st0.x_t.data + a.data, atol=1e-12)
    np.testing.assert_allclose(st1.x_e.data, st0.x_e.data + f.data, atol=1e-12)


def test_cascade_accumulates_both_sublayers(rng):
    m = tiny_model()
    g = Graph(record=False)
    st0 = m.embed_init(g, rng.integers(0, 20, size=(1, 5)))
    st1, _, _ = m.layer_forward(g, st0, 0)
    x = st0.x_t.data
    a, _, _ = m.gated_attention(g, m._ln(g, Tensor(x), "h.0.ln1"), 0)
    f = m.ffn(g, m._ln(g, Tensor(x + a.data), "h.0.ln2"), 0)
    np.testing.assert_allclose(st1.x_e.data, a.data + f.data, atol=1e-12)


# ---------------------------------------------------------------------- logits


def test_one_logit_set_per_layer(rng):
    m = DualStreamTransformer(small_config(), seed=0)
    out = m.forward(rng.integers(0, 40, size=(1, 4)))
    assert out.layer_logits().shape == (6, 1, 4, 40)


def test_tied_head_orthonormal_rows():
    d, V = 16, 6
    cfg = TINY.replace(d_model=d, n_heads=2, vocab_size=V, positional="none")
    m = DualStreamTransformer(cfg, seed=0, dtype=np.float64)
    basis = np.linalg.qr(np.random.default_rng(0).normal(size=(d, d)))[0]
    centered = basis - basis.mean(axis=0, keepdims=True)
    rows, _ = np.linalg.qr(centered[:, :V])  # orthonormal columns, each zero-mean
    m.params["wte"].data[:] = rows.T
    for k in range(V):
        st = type("S", (), {})()
        st.x_t, st.x_e = Tensor(rows.T[k][None, None, :]), Tensor(np.zeros((1, 1, d)))
        z = m.logits_from_state(Graph(record=False), st).data[0, 0]
        assert int(np.argmax(z)) == k


def test_identical_states_identical_logits(rng):
    m = tiny_model()
    x = Tensor(rng.normal(size=(1, 3, 8)))
    st = type("S", (), {"x_t": x, "x_e": Tensor(np.zeros((1, 3, 8)))})()
    a = m.logits_from_state(Graph(record=False), st).data
    b = m.logits_from_state(Graph(record=False), st).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------- loss


def test_pls_weights():
    assert pls_weights(6) == [1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6]


def test_lambda_zero_is_final_ce(rng):
    ids = rng.integers(0, 20, size=(2, 6))
    for cfg in (TINY.replace(pls_lambda=0.0), TINY.replace(pls_enabled=False)):
        m = DualStreamTransformer(cfg, seed=0, dtype=np.float64)
        out = m.forward(ids)
        g = Graph(record=False)
        loss, ce = pls_loss(g, out.logits, ids, cfg)
        final = g.cross_entropy(g.drop_last_position(out.logits[-1]), ids[:, 1:])
        assert loss.item() == final.item() == ce[-1]


def test_identical_layer_logits_scale_loss(rng):
    cfg = small_config()
    z = Tensor(rng.normal(size=(1, 5, cfg.vocab_size)))
    ids = rng.integers(0, cfg.vocab_size, size=(1, 5))
    loss, ce = pls_loss(Graph(record=False), [z] * 6, ids, cfg)
    assert loss.item() == pytest.approx(1.25 * ce[-1], rel=1e-12)


def test_pls_loss_bad_target(rng):
    z = Tensor(rng.normal(size=(1, 3, 20)))
    with pytest.raises(IndexError):
        pls_loss(Graph(record=False), [z, z], np.array([[1, 2, 25]]), TINY)


def test_gradcheck_tiny_model(rng):
    m = tiny_model()
    for name, p in m.params.items():
        p.data[:] = rng.normal(scale=0.2, size=p.shape) + (1.0 if name.endswith(".g") else 0.0)
    ids = rng.integers(0, 20, size=(2, 8))

    def loss_fn(g):
        return pls_loss(g, m.forward(ids, graph=g).logits, ids, m.config)[0]

    rep = finite_difference_check(m.params, loss_fn, max_per_tensor=12)
    assert rep.max_rel_error < 1e-4, rep.per_tensor


# ---------------------------------------------------------------------- interventions


def test_scale_one_is_bit_identical(rng):
    m = DualStreamTransformer(small_config(), seed=2)
    ids = rng.integers(0, 40, size=(2, 9))
    base = m.forward(ids).layer_logits()
    spec = InterventionSpec([(l, h) for l in range(6) for h in range(6)], 1.0)
    assert np.array_equal(base, m.forward(ids, intervention=spec).layer_logits())


def test_zero_all_heads_equals_ffn_only(rng):
    m = DualStreamTransformer(small_config(), seed=2)
    ids = rng.integers(0, 40, size=(2, 9))
    spec = InterventionSpec([(l, h) for l in range(6) for h in range(6)], 0.0)
    a = m.forward(ids, intervention=spec).layer_logits()
    b = m.forward(ids, skip_attention=True).layer_logits()
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_half_scale_halves_contribution(rng):
    m = tiny_model()
    ids = rng.integers(0, 20, size=(1, 6))
    dh = m.config.d_head
    wo = m.params["h.1.attn.wo"].data[dh : 2 * dh]
    contrib = {}
    for s in (0.0, 0.5, 1.0):
        y = m.forward(ids, intervention=InterventionSpec([(1, 1)], s)).head_outputs[1].data[:, 1]
        contrib[s] = y @ wo
    np.testing.assert_allclose(contrib[0.5], 0.5 * contrib[1.0], atol=1e-15)
    assert np.all(contrib[0.0] == 0.0)


def test_ablation_removes_projected_contribution(rng):
    m = tiny_model()
    ids = rng.integers(0, 20, size=(1, 6))
    g = Graph(record=False)
    st = m.embed_init(g, ids)
    h = m._ln(g, Tensor(st.x_t.data + st.x_e.data), "h.0.ln1")
    full, _, y = m.gated_attention(g, h, 0)
    ablated, _, _ = m.gated_attention(g, h, 0, np.array([1.0, 0.0]))
    dh = m.config.d_head
    np.testing.assert_allclose(ablated.data - full.data, -(y.data[:, 1] @ m.params["h.0.attn.wo"].data[dh:]), atol=1e-12)


def test_intervention_head_out_of_range():
    with pytest.raises(IndexError):
        tiny_model().forward(np.array([[1, 2]]), intervention=InterventionSpec([(0, 5)], 0.0))
    with pytest.raises(ValueError):
        InterventionSpec([(0, 0)], -1.0)


def test_pls_and_c2_share_forward(rng):
    ids = rng.integers(0, 40, size=(1, 8))
    a = DualStreamTransformer(small_config(pls_enabled=True), seed=5)
    b = DualStreamTransformer(small_config(pls_enabled=False), seed=5)
    assert a.fingerprint() == b.fingerprint()
    assert np.array_equal(a.forward(ids).layer_logits(), b.forward(ids).layer_logits())


def test_checkpoint_round_trip(tmp_path):
    m = DualStreamTransformer(small_config(mode="dual_standard"), seed=4)
    m.save(tmp_path / "m.ckpt")
    back = DualStreamTransformer.load(tmp_path / "m.ckpt")
    assert back.config == m.config
    assert back.fingerprint() == m.fingerprint()
    assert m.header()["mode"] == "dual_standard"
