"""Per-prediction computation traces and their binary file format.

A trace describes how the model produced its next-token prediction at one
position: per-layer probabilities of the final prediction, the query row of
raw and gated attention at every layer, mean gates, and a raw activation
vector used by the clustering baseline.

Trace file layout (little-endian)::

    b"HFTR", u32 version
    u32 n_layers, u32 n_heads, u32 d_model, u32 vocab_size, u32 baseline_layer
    u32 flags            bit 0: raw_activation is the [x_t; x_e] concatenation
    u64 count
    per trace:
        u32 seq_id, u32 query_pos, u32 context_len, u32 final_pred, i64 ground_truth (-1 = none)
        f32 layer_probs[L], u32 layer_argmax[L], f32 layer_second_prob[L]
        f32 attn_rows[L*H*(query_pos+1)], f32 raw_attn_rows[same]
        f32 gate_means[L*H]
        f32 raw_activation[2*d_model]
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import DualStreamTransformer

MAGIC = b"HFTR"
VERSION = 1
FLAG_CONCAT_ACTIVATION = 1


class TraceFormatError(ValueError):
    pass


@dataclass
class PredictionTrace:
    query_pos: int
    context_len: int
    final_pred: int
    ground_truth: int | None
    layer_probs: np.ndarray  # [L] float32, probability of final_pred at each layer
    layer_argmax: np.ndarray  # [L] int64
    layer_second_prob: np.ndarray  # [L] float32, second-highest probability at each layer
    attn_rows: np.ndarray  # [L, H, query_pos + 1] float32, gated attention
    raw_attn_rows: np.ndarray  # [L, H, query_pos + 1] float32, softmax attention
    gate_means: np.ndarray  # [L, H] float32
    raw_activation: np.ndarray  # [2d] float32
    seq_id: int = 0

    @property
    def position(self) -> int:
        """Index of the predicted token."""
        return self.query_pos + 1

    @property
    def n_layers(self) -> int:
        return int(self.layer_probs.shape[0])

    @property
    def n_heads(self) -> int:
        return int(self.gate_means.shape[1])

    def equals(self, other: "PredictionTrace") -> bool:
        scalars = ("query_pos", "context_len", "final_pred", "ground_truth", "seq_id")
        arrays = (
            "layer_probs",
            "layer_argmax",
            "layer_second_prob",
            "attn_rows",
            "raw_attn_rows",
            "gate_means",
            "raw_activation",
        )
        return all(getattr(self, s) == getattr(other, s) for s in scalars) and all(
            np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays
        )


def _layer_stats(z: np.ndarray) -> tuple[np.ndarray, int]:
    """Softmax (float64) of one logit row and its argmax."""
    z = z.astype(np.float64)
    p = np.exp(z - z.max())
    p /= p.sum()
    return p, int(np.argmax(z))


def capture_batch(
    model: DualStreamTransformer,
    windows: np.ndarray,
    positions: Sequence[Sequence[int]],
    baseline_layer: int = 5,
    seq_ids: Sequence[int] | None = None,
) -> list[PredictionTrace]:
    """Traces for several windows at once; ``positions[i]`` lists predicted positions in window ``i``."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    n, t = windows.shape
    cfg = model.config
    if not 0 <= baseline_layer < cfg.n_layers:
        raise ValueError(f"baseline_layer {baseline_layer} out of range for {cfg.n_layers} layers")
    if len(positions) != n:
        raise ValueError("need one position list per window")
    for plist in positions:
        for pos in plist:
            if pos < 1:
                raise ValueError(f"position {pos} has no previous token to act as query; positions must be >= 1")
            if pos > t:
                raise ValueError(f"position {pos} lies beyond the context of length {t}")
    seq_ids = list(range(n)) if seq_ids is None else list(seq_ids)
    out = model.forward(windows)
    logits = out.layer_logits()  # [L, B, T, V]
    act_state = out.states[baseline_layer + 1]
    traces = []
    for b in range(n):
        for pos in positions[b]:
            tq = pos - 1
            probs, argmax, second = [], [], []
            for l in range(cfg.n_layers):
                p, a = _layer_stats(logits[l, b, tq])
                probs.append(p)
                argmax.append(a)
            final = argmax[-1]
            for p in probs:
                second.append(np.partition(p, -2)[-2] if p.shape[0] > 1 else 0.0)
            attn = np.stack([rec.attn_eff[b, :, tq, : tq + 1] for rec in out.records]).astype(np.float32)
            raw = np.stack([rec.attn[b, :, tq, : tq + 1] for rec in out.records]).astype(np.float32)
            gates = np.stack([rec.gate_mean[b, :, tq] for rec in out.records]).astype(np.float32)
            act = np.concatenate([act_state.x_t.data[b, tq], act_state.x_e.data[b, tq]]).astype(np.float32)
            traces.append(
                PredictionTrace(
                    query_pos=tq,
                    context_len=t,
                    final_pred=final,
                    ground_truth=int(windows[b, pos]) if pos < t else None,
                    layer_probs=np.array([p[final] for p in probs], dtype=np.float32),
                    layer_argmax=np.array(argmax, dtype=np.int64),
                    layer_second_prob=np.array(second, dtype=np.float32),
                    attn_rows=attn,
                    raw_attn_rows=raw,
                    gate_means=gates,
                    raw_activation=act,
                    seq_id=int(seq_ids[b]),
                )
            )
    return traces


def capture(
    model: DualStreamTransformer,
    token_ids: Sequence[int],
    positions: Iterable[int],
    baseline_layer: int = 5,
    seq_id: int = 0,
) -> list[PredictionTrace]:
    """One trace per requested position; position ``t`` is predicted from query ``t - 1``."""
    return capture_batch(model, np.asarray(token_ids)[None, :], [list(positions)], baseline_layer, [seq_id])


# ---------------------------------------------------------------------- file format


@dataclass
class TraceHeader:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    baseline_layer: int
    flags: int = FLAG_CONCAT_ACTIVATION


def write_traces(path: str | Path, traces: Sequence[PredictionTrace], header: TraceHeader) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(
        struct.pack(
            "<6I", header.n_layers, header.n_heads, header.d_model, header.vocab_size, header.baseline_layer, header.flags
        )
    )
    buf.write(struct.pack("<Q", len(traces)))
    L, H = header.n_layers, header.n_heads
    for tr in traces:
        if tr.attn_rows.shape != (L, H, tr.query_pos + 1) or tr.raw_activation.shape != (2 * header.d_model,):
            raise TraceFormatError("trace shape does not match the file header")
        gt = -1 if tr.ground_truth is None else tr.ground_truth
        buf.write(struct.pack("<4Iq", tr.seq_id, tr.query_pos, tr.context_len, tr.final_pred, gt))
        buf.write(np.asarray(tr.layer_probs, dtype="<f4").tobytes())
        buf.write(np.asarray(tr.layer_argmax, dtype="<u4").tobytes())
        buf.write(np.asarray(tr.layer_second_prob, dtype="<f4").tobytes())
        buf.write(np.asarray(tr.attn_rows, dtype="<f4").tobytes())
        buf.write(np.asarray(tr.raw_attn_rows, dtype="<f4").tobytes())
        buf.write(np.asarray(tr.gate_means, dtype="<f4").tobytes())
        buf.write(np.asarray(tr.raw_activation, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _take(f: io.BytesIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise TraceFormatError("truncated trace file")
    return b


def read_traces(path: str | Path) -> tuple[TraceHeader, list[PredictionTrace]]:
    f = io.BytesIO(Path(path).read_bytes())
    if _take(f, 4) != MAGIC:
        raise TraceFormatError("not a trace file (bad magic)")
    (version,) = struct.unpack("<I", _take(f, 4))
    if version != VERSION:
        raise TraceFormatError(f"unsupported trace file version {version}")
    header = TraceHeader(*struct.unpack("<6I", _take(f, 24)))
    (count,) = struct.unpack("<Q", _take(f, 8))
    L, H, d = header.n_layers, header.n_heads, header.d_model

    def arr(n, dt, shape=None):
        a = np.frombuffer(_take(f, 4 * n), dtype=dt)
        return a.reshape(shape) if shape is not None else a

    traces = []
    for _ in range(count):
        seq_id, tq, ctx, final, gt = struct.unpack("<4Iq", _take(f, 24))
        k = tq + 1
        traces.append(
            PredictionTrace(
                query_pos=tq,
                context_len=ctx,
                final_pred=final,
                ground_truth=None if gt < 0 else gt,
                layer_probs=arr(L, "<f4").astype(np.float32),
                layer_argmax=arr(L, "<u4").astype(np.int64),
                layer_second_prob=arr(L, "<f4").astype(np.float32),
                attn_rows=arr(L * H * k, "<f4", (L, H, k)).astype(np.float32),
                raw_attn_rows=arr(L * H * k, "<f4", (L, H, k)).astype(np.float32),
                gate_means=arr(L * H, "<f4", (L, H)).astype(np.float32),
                raw_activation=arr(2 * d, "<f4").astype(np.float32),
                seq_id=seq_id,
            )
        )
    if f.read(1):
        raise TraceFormatError("trailing bytes after the last trace")
    return header, traces


def header_for(model: DualStreamTransformer, baseline_layer: int = 5) -> TraceHeader:
    c = model.config
    return TraceHeader(c.n_layers, c.n_heads, c.d_model, c.vocab_size, baseline_layer)
