"""Dual-stream transformer with gated attention and per-layer logits.

The residual state is a pair ``(x_t, x_e)``: a token stream seeded from the
embedding table and a contextual stream that starts at zero. In ``cascade``
mode every sublayer writes into ``x_e`` and ``x_t`` is never touched; in
``dual_standard`` mode attention writes into ``x_t`` and the FFN into ``x_e``.
Logits are read at every layer through a shared final LayerNorm and the tied
embedding matrix.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import checkpoint
from .tensor import Graph, Tensor, parameter

MODES = ("cascade", "dual_standard")
POSITIONAL = ("learned", "none")


@dataclass
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 6
    d_model: int = 384
    d_ff: int = 1536
    vocab_size: int = 50257
    max_seq_len: int = 512
    dropout: float = 0.1
    pls_enabled: bool = True
    pls_lambda: float = 0.1
    mode: str = "cascade"
    # Learned absolute positions are added to x_t^(0); x_e^(0) stays zero.
    positional: str = "learned"
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("n_layers and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.pls_lambda < 0:
            raise ValueError("pls_lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.positional not in POSITIONAL:
            raise ValueError(f"positional must be one of {POSITIONAL}, got {self.positional!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class InterventionSpec:
    """Multiply the post-gate output of each target head by ``scale``.

    ``scale=0`` is ablation and ``scale=1`` is the identity.
    """

    targets: frozenset[tuple[int, int]]
    scale: float = 0.0

    def __init__(self, targets: Iterable[tuple[int, int]], scale: float = 0.0):
        object.__setattr__(self, "targets", frozenset((int(l), int(h)) for l, h in targets))
        object.__setattr__(self, "scale", float(scale))
        if self.scale < 0:
            raise ValueError(f"intervention scale must be >= 0, got {self.scale}")

    def head_scales(self, config: ModelConfig) -> list[np.ndarray | None]:
        per_layer: list[np.ndarray | None] = [None] * config.n_layers
        for layer, head in sorted(self.targets):
            if not (0 <= layer < config.n_layers and 0 <= head < config.n_heads):
                raise IndexError(
                    f"head ({layer}, {head}) out of range for {config.n_layers} layers x {config.n_heads} heads"
                )
            if per_layer[layer] is None:
                per_layer[layer] = np.ones(config.n_heads)
            per_layer[layer][head] = self.scale
        return per_layer


@dataclass
class DualStreamState:
    x_t: Tensor
    x_e: Tensor


@dataclass
class AttentionRecord:
    """Per-layer attention bookkeeping; arrays carry a leading batch axis."""

    attn: np.ndarray  # [B, H, T, T] softmax attention
    gate_mean: np.ndarray  # [B, H, T] mean gate over the head width
    attn_eff: np.ndarray  # [B, H, T, T] attention scaled by the mean gate


@dataclass
class ForwardOutput:
    logits: list[Tensor]  # per layer, [B, T, V]
    records: list[AttentionRecord]
    states: list[DualStreamState]  # states[0] is the embedding, states[l+1] follows layer l
    head_outputs: list[Tensor] = field(default_factory=list)  # post-gate y_h per layer, [B, H, T, dh]

    def layer_logits(self) -> np.ndarray:
        """Stacked logits, [L, B, T, V]."""
        return np.stack([z.data for z in self.logits])


def pls_weights(n_layers: int) -> list[float]:
    """Auxiliary weights (l + 1) / L for layers 0 .. L-2."""
    return [(l + 1) / n_layers for l in range(n_layers - 1)]


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, h, dh, ff = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_ff
    shapes = [("wte", (cfg.vocab_size, d), "normal")]
    if cfg.positional == "learned":
        shapes.append(("wpe", (cfg.max_seq_len, d), "normal"))
    for i in range(cfg.n_layers):
        p = f"h.{i}."
        shapes += [
            (p + "ln1.g", (d,), "ones"),
            (p + "ln1.b", (d,), "zeros"),
            (p + "attn.wq", (d, d), "normal"),
            (p + "attn.wk", (d, d), "normal"),
            (p + "attn.wv", (d, d), "normal"),
            (p + "attn.wg", (h, dh, dh), "normal"),
            (p + "attn.bg", (h, dh), "zeros"),
            (p + "attn.wo", (d, d), "normal"),
            (p + "ln2.g", (d,), "ones"),
            (p + "ln2.b", (d,), "zeros"),
            (p + "ffn.w1", (d, ff), "normal"),
            (p + "ffn.b1", (ff,), "zeros"),
            (p + "ffn.w2", (ff, d), "normal"),
            (p + "ffn.b2", (d,), "zeros"),
        ]
    shapes += [("ln_f.g", (d,), "ones"), ("ln_f.b", (d,), "zeros")]
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Normal(0, init_std) projections and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "normal":
            out[name] = (rng.standard_normal(shape) * cfg.init_std).astype(dtype)
        elif kind == "ones":
            out[name] = np.ones(shape, dtype=dtype)
        else:
            out[name] = np.zeros(shape, dtype=dtype)
    return out


class DualStreamTransformer:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        raw = params if params is not None else init_params(config, seed, dtype)
        expected = {name: shape for name, shape, _ in _param_shapes(config)}
        if set(raw) != set(expected):
            missing, extra = set(expected) - set(raw), set(raw) - set(expected)
            raise ValueError(f"parameter set mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if tuple(raw[name].shape) != shape:
                raise ValueError(f"parameter {name} has shape {raw[name].shape}, expected {shape}")
        self.params: dict[str, Tensor] = {
            name: parameter(np.array(raw[name], dtype=dtype), name) for name, _, _ in _param_shapes(config)
        }

    # ------------------------------------------------------------------ persistence

    @property
    def dtype(self):
        return self.params["wte"].data.dtype

    def astype(self, dtype) -> "DualStreamTransformer":
        return DualStreamTransformer(self.config, {k: v.data for k, v in self.params.items()}, dtype=dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def header(self) -> dict:
        return {
            "kind": "dual_stream_transformer",
            "config": asdict(self.config),
            "mode": self.config.mode,
            "pls_enabled": self.config.pls_enabled,
            "deviations": {"positional": "learned position embeddings added into x_t^(0)"}
            if self.config.positional == "learned"
            else {},
        }

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.state_dict(), self.header())

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "DualStreamTransformer":
        header, tensors = checkpoint.load(path)
        if header.get("kind") != "dual_stream_transformer":
            raise checkpoint.CheckpointError(f"{path} is not a model checkpoint")
        return cls(ModelConfig(**header["config"]), tensors, dtype=dtype)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------------ forward pieces

    def embed_init(self, g: Graph, token_ids: np.ndarray) -> DualStreamState:
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        b, t = ids.shape
        if t > self.config.max_seq_len and self.config.positional == "learned":
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}")
        x_t = g.embedding(self.params["wte"], ids)
        if self.config.positional == "learned":
            pos = g.slice_rows(self.params["wpe"], t)
            x_t = g.add(x_t, pos)
        x_e = Tensor(np.zeros((b, t, self.config.d_model), dtype=self.dtype))
        return DualStreamState(x_t, x_e)

    def gated_attention(
        self,
        g: Graph,
        h: Tensor,
        layer: int,
        head_scales: np.ndarray | None = None,
    ) -> tuple[Tensor, AttentionRecord, Tensor]:
        """Gated multi-head attention over the normalized combined stream ``h``.

        Returns the projected update, the attention record and the post-gate
        (post-intervention) head outputs.
        """
        cfg = self.config
        p = f"h.{layer}.attn."
        q = g.split_heads(g.matmul(h, self.params[p + "wq"]), cfg.n_heads)
        k = g.split_heads(g.matmul(h, self.params[p + "wk"]), cfg.n_heads)
        v = g.split_heads(g.matmul(h, self.params[p + "wv"]), cfg.n_heads)
        scores = g.scale(g.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(cfg.d_head))
        attn = g.causal_softmax(scores)
        mixed = g.matmul(attn, v)
        gate = g.sigmoid(g.head_linear(q, self.params[p + "wg"], self.params[p + "bg"]))
        y = g.mul(gate, mixed)
        if head_scales is not None:
            y = g.head_scale(y, head_scales)
        out = g.matmul(g.merge_heads(y), self.params[p + "wo"])
        gate_mean = gate.data.mean(axis=-1)
        record = AttentionRecord(attn.data, gate_mean, attn.data * gate_mean[..., None])
        return out, record, y

    def ffn(self, g: Graph, h: Tensor, layer: int) -> Tensor:
        p = f"h.{layer}.ffn."
        hidden = g.gelu(g.add(g.matmul(h, self.params[p + "w1"]), self.params[p + "b1"]))
        return g.add(g.matmul(hidden, self.params[p + "w2"]), self.params[p + "b2"])

    def _ln(self, g: Graph, x: Tensor, prefix: str) -> Tensor:
        return g.layernorm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def layer_forward(
        self,
        g: Graph,
        state: DualStreamState,
        layer: int,
        head_scales: np.ndarray | None = None,
        skip_attention: bool = False,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[DualStreamState, AttentionRecord | None, Tensor | None]:
        """One Pre-LN block: a = Attn(LN(x)), f = FFN(LN(x + a))."""
        p_drop = self.config.dropout if train else 0.0
        if p_drop > 0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        x = g.add(state.x_t, state.x_e)
        record = y = None
        if skip_attention:
            a = None
            f_in = x
        else:
            a, record, y = self.gated_attention(g, self._ln(g, x, f"h.{layer}.ln1"), layer, head_scales)
            a = g.dropout(a, p_drop, rng)
            f_in = g.add(x, a)
        f = g.dropout(self.ffn(g, self._ln(g, f_in, f"h.{layer}.ln2"), layer), p_drop, rng)
        if self.config.mode == "cascade":
            x_e = state.x_e if a is None else g.add(state.x_e, a)
            return DualStreamState(state.x_t, g.add(x_e, f)), record, y
        x_t = state.x_t if a is None else g.add(state.x_t, a)
        return DualStreamState(x_t, g.add(state.x_e, f)), record, y

    def logits_from_state(self, g: Graph, state: DualStreamState) -> Tensor:
        """z = LayerNorm(x_t + x_e) @ W_E^T with the shared final LayerNorm."""
        x = g.add(state.x_t, state.x_e)
        return g.matmul(self._ln(g, x, "ln_f"), self.params["wte"], transpose_b=True)

    def forward(
        self,
        token_ids: np.ndarray,
        *,
        graph: Graph | None = None,
        intervention: InterventionSpec | None = None,
        skip_attention: bool = False,
        train: bool = False,
        rng: np.random.Generator | None = None,
        with_logits: bool | Iterable[int] = True,
    ) -> ForwardOutput:
        """Run the full stack.

        ``with_logits`` may be a set of layer indices to restrict which per-layer
        logits are computed (others are left as ``None``).
        """
        g = graph if graph is not None else Graph(record=False)
        cfg = self.config
        scales = intervention.head_scales(cfg) if intervention is not None else [None] * cfg.n_layers
        want = set(range(cfg.n_layers)) if with_logits is True else set() if with_logits is False else set(with_logits)
        state = self.embed_init(g, token_ids)
        states = [state]
        records, heads, logits = [], [], []
        for layer in range(cfg.n_layers):
            state, rec, y = self.layer_forward(g, state, layer, scales[layer], skip_attention, train, rng)
            states.append(state)
            records.append(rec)
            heads.append(y)
            logits.append(self.logits_from_state(g, state) if layer in want else None)
        return ForwardOutput(logits, records, states, heads)


def pls_loss(
    g: Graph,
    layer_logits: list[Tensor],
    token_ids: np.ndarray,
    config: ModelConfig,
) -> tuple[Tensor, list[float]]:
    """Final-layer CE plus lambda-weighted auxiliary CE of earlier layers.

    Logits at position i are scored against token i + 1. Returns the loss
    tensor and the per-layer CE values.
    """
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    vocab = config.vocab_size
    if ids.size and ids.max() >= vocab:
        pos = tuple(int(i) for i in np.argwhere(ids >= vocab)[0])
        raise IndexError(f"target id {int(ids[pos])} at position {pos} >= vocab {vocab}")
    targets = ids[:, 1:]
    L = config.n_layers
    ces = []
    for z in layer_logits:
        ces.append(g.cross_entropy(g.drop_last_position(z), targets))
    loss = ces[L - 1]
    if config.pls_enabled and config.pls_lambda > 0 and L > 1:
        aux = None
        for w, ce in zip(pls_weights(L), ces[: L - 1]):
            term = g.scale(ce, w)
            aux = term if aux is None else g.add(aux, term)
        loss = g.add(loss, g.scale(aux, config.pls_lambda))
    return loss, [ce.item() for ce in ces]

