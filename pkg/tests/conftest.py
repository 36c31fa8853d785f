import numpy as np
import pytest

from cascadelab.model import DualStreamTransformer, ModelConfig
from cascadelab.trace import PredictionTrace

TINY = ModelConfig(
    n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=20, max_seq_len=8, dropout=0.0, init_std=0.2
)


def tiny_model(dtype=np.float64, seed=0, **changes) -> DualStreamTransformer:
    return DualStreamTransformer(TINY.replace(**changes), seed=seed, dtype=dtype)


def small_config(**changes) -> ModelConfig:
    base = ModelConfig(
        n_layers=6, n_heads=6, d_model=24, d_ff=48, vocab_size=40, max_seq_len=16, dropout=0.0, init_std=0.2
    )
    return base.replace(**changes)


def random_trace(rng: np.random.Generator, L: int = 6, H: int = 6, tq: int | None = None, vocab: int = 50):
    """A self-consistent random trace: gated rows sum to the gate means."""
    if tq is None:
        tq = int(rng.integers(0, 20))
    k = tq + 1
    raw = rng.random((L, H, k)) ** 3
    raw /= raw.sum(axis=-1, keepdims=True)
    gates = rng.random((L, H))
    gates[rng.random((L, H)) < 0.2] *= 0.1
    attn = raw * gates[..., None]
    final = int(rng.integers(vocab))
    argmax = np.where(rng.random(L) < 0.6, final, rng.integers(vocab, size=L))
    argmax[-1] = final
    probs = rng.random(L)
    second = probs * rng.random(L)
    return PredictionTrace(
        query_pos=tq,
        context_len=tq + 2,
        final_pred=final,
        ground_truth=int(rng.integers(vocab)) if rng.random() < 0.5 else final,
        layer_probs=probs.astype(np.float32),
        layer_argmax=argmax.astype(np.int64),
        layer_second_prob=second.astype(np.float32),
        attn_rows=attn.astype(np.float32),
        raw_attn_rows=raw.astype(np.float32),
        gate_means=gates.astype(np.float32),
        raw_activation=rng.normal(size=16).astype(np.float32),
        seq_id=int(rng.integers(1000)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
