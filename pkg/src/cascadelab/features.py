"""Vocabulary-invariant features computed from prediction traces.

Layouts for L layers and H heads (163 / 167 / 455 dims at L = H = 6):

Tier 2::

    [0, L)                 traj_prob
    [L, 2L)                traj_margin
    [2L, 3L-1)             traj_drops
    3L-1                   k*  (stability layer, ordinal scalar)
    3L                     kappa (longest run of layers predicting the target)
    +LH                    head_act_stable  (only the k* slice is non-zero)
    +LH                    head_act_final   (only the L-1 slice is non-zero)
    +LH                    head_ent_stable
    +LH                    head_ent_final
    (+4 with positions)    attn_span_stable, attn_span_final, local_mass_stable, local_mass_final

Top-k: trajectory, stability, top-k at k* (L*H*k), top-k at L-1 (L*H*k),
entropy stable + final (2LH), position block (4).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .trace import PredictionTrace

GHOST_THRESHOLD = 0.1
LOCAL_WINDOW = 5

TIERS = {"t1": 1, "t2": 2, "t2p": 3, "topk": 4}
MAGIC = b"HFFM"
VERSION = 1


@dataclass(frozen=True)
class HeadGroups:
    anchor: tuple[tuple[int, int], ...] = ((5, 2), (5, 3))
    entity: tuple[tuple[int, int], ...] = ((5, 4), (5, 5))

    def validate(self, n_layers: int, n_heads: int) -> None:
        for layer, head in self.anchor + self.entity:
            if not (0 <= layer < n_layers and 0 <= head < n_heads):
                raise ValueError(f"head ({layer}, {head}) out of range for {n_layers} layers x {n_heads} heads")


def tier_dim(tier: str, n_layers: int = 6, n_heads: int = 6, k: int = 5) -> int:
    L, H = n_layers, n_heads
    base = (3 * L - 1) + 2
    if tier == "t1":
        return 5
    if tier == "t2":
        return base + 4 * L * H
    if tier == "t2p":
        return base + 4 * L * H + 4
    if tier == "topk":
        return base + 2 * L * H * k + 2 * L * H + 4
    raise ValueError(f"unknown tier {tier!r}; expected one of {sorted(TIERS)}")


# ---------------------------------------------------------------------- components


def trajectory(trace: PredictionTrace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gated per-layer probability of the final prediction, margin over second best, and drops."""
    probs = trace.layer_probs.astype(np.float64)
    agree = trace.layer_argmax == trace.final_pred
    traj_prob = np.where(agree, probs, 0.0)
    traj_margin = traj_prob - trace.layer_second_prob.astype(np.float64)
    traj_drops = np.maximum(0.0, traj_prob[:-1] - traj_prob[1:])
    return traj_prob, traj_margin, traj_drops


def stability(trace: PredictionTrace) -> tuple[int, int]:
    """(k*, kappa).

    k* is the earliest layer from which every deeper layer predicts the final
    token. kappa is the longest run of consecutive layers predicting the ground
    truth, or the final prediction when no ground truth is known.
    """
    argmax = trace.layer_argmax
    L = argmax.shape[0]
    k_star = L - 1
    while k_star > 0 and argmax[k_star - 1] == trace.final_pred:
        k_star -= 1
    target = trace.final_pred if trace.ground_truth is None else trace.ground_truth
    best = run = 0
    for a in argmax:
        run = run + 1 if a == target else 0
        best = max(best, run)
    return k_star, best


def _rows(trace: PredictionTrace, layer: int) -> np.ndarray:
    if not 0 <= layer < trace.n_layers:
        raise ValueError(f"layer {layer} out of range for {trace.n_layers} layers")
    # Sorting fixes the summation order, which makes every reduction below exactly
    # invariant to permutations of the key positions.
    return np.sort(trace.attn_rows[layer].astype(np.float64), axis=-1)


def head_activation(trace: PredictionTrace, layer: int) -> np.ndarray:
    """Peak gated attention of every head at ``layer``."""
    return _rows(trace, layer)[:, -1]


def head_entropy(trace: PredictionTrace, layer: int) -> np.ndarray:
    """Natural-log entropy of each head's renormalized gated row; 0 for ghost heads."""
    rows = _rows(trace, layer)
    act = rows[:, -1]
    out = np.zeros(rows.shape[0])
    for h in range(rows.shape[0]):
        if act[h] < GHOST_THRESHOLD:
            continue
        q = rows[h] / rows[h].sum()
        q = q[q > 0]
        out[h] = max(0.0, float(-(q * np.log(q)).sum()))
    return out


def position_features(trace: PredictionTrace, layer: int) -> tuple[float, float]:
    """(attention span, local mass) pooled over heads at ``layer``.

    Span is 0 when the query carries no gated attention at all.
    """
    if not 0 <= layer < trace.n_layers:
        raise ValueError(f"layer {layer} out of range for {trace.n_layers} layers")
    rows = trace.attn_rows[layer].astype(np.float64)
    tq = trace.query_pos
    dist = tq - np.arange(tq + 1)
    total = rows.sum()
    span = float((rows * dist).sum() / total) if total > 0 else 0.0
    lo = max(0, tq - LOCAL_WINDOW)
    local = float(rows[:, lo:tq].sum())
    return span, local


def topk_values(trace: PredictionTrace, layer: int, k: int = 5) -> np.ndarray:
    """[H, k] largest gated attention values per head, descending, zero-padded.

    Heads whose mean gate is below the ghost threshold emit zeros.
    """
    rows = _rows(trace, layer)[:, ::-1]
    H, n = rows.shape
    out = np.zeros((H, k))
    m = min(k, n)
    out[:, :m] = rows[:, :m]
    out[trace.gate_means[layer] < GHOST_THRESHOLD] = 0.0
    return out


# ---------------------------------------------------------------------- assembled vectors


def _slot(values: np.ndarray, layer: int, n_layers: int) -> np.ndarray:
    """Place per-head values of one layer into an [L*H*...] block, zeros elsewhere."""
    block = np.zeros((n_layers,) + values.shape)
    block[layer] = values
    return block.reshape(-1)


def _head_blocks(trace: PredictionTrace, k_star: int) -> tuple[np.ndarray, ...]:
    L = trace.n_layers
    stable = min(k_star, L - 1)
    final = L - 1
    return (
        _slot(head_activation(trace, stable), stable, L),
        _slot(head_activation(trace, final), final, L),
        _slot(head_entropy(trace, stable), stable, L),
        _slot(head_entropy(trace, final), final, L),
    )


def _position_block(trace: PredictionTrace, k_star: int) -> np.ndarray:
    L = trace.n_layers
    stable = min(k_star, L - 1)
    span_s, local_s = position_features(trace, stable)
    span_f, local_f = position_features(trace, L - 1)
    return np.array([span_s, span_f, local_s, local_f])


def tier1(trace: PredictionTrace, groups: HeadGroups = HeadGroups()) -> np.ndarray:
    """[processing_depth, confidence, anchor_mass, entity_mass, context_span]."""
    groups.validate(trace.n_layers, trace.n_heads)
    k_star, _ = stability(trace)

    def mass(heads):
        return float(sum(head_activation(trace, l)[h] for l, h in heads))

    span_final, _ = position_features(trace, trace.n_layers - 1)
    return np.array(
        [k_star, float(trace.layer_probs[-1]), mass(groups.anchor), mass(groups.entity), span_final], dtype=np.float64
    )


def tier2(trace: PredictionTrace, include_position: bool = False) -> np.ndarray:
    traj_prob, traj_margin, traj_drops = trajectory(trace)
    k_star, kappa = stability(trace)
    parts = [traj_prob, traj_margin, traj_drops, np.array([k_star, kappa], dtype=np.float64)]
    parts += list(_head_blocks(trace, k_star))
    if include_position:
        parts.append(_position_block(trace, k_star))
    return np.concatenate(parts)


def topk_features(trace: PredictionTrace, k: int = 5) -> np.ndarray:
    traj_prob, traj_margin, traj_drops = trajectory(trace)
    k_star, kappa = stability(trace)
    L = trace.n_layers
    stable = min(k_star, L - 1)
    _, _, ent_s, ent_f = _head_blocks(trace, k_star)
    return np.concatenate(
        [
            traj_prob,
            traj_margin,
            traj_drops,
            np.array([k_star, kappa], dtype=np.float64),
            _slot(topk_values(trace, stable, k), stable, L),
            _slot(topk_values(trace, L - 1, k), L - 1, L),
            ent_s,
            ent_f,
            _position_block(trace, k_star),
        ]
    )


def extract(traces: Sequence[PredictionTrace], tier: str, groups: HeadGroups = HeadGroups(), k: int = 5) -> np.ndarray:
    """Stack feature vectors of one tier into an [n, dim] matrix."""
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; expected one of {sorted(TIERS)}")
    if not traces:
        L, H = 6, 6
        return np.zeros((0, tier_dim(tier, L, H, k)))
    fn = {
        "t1": lambda t: tier1(t, groups),
        "t2": lambda t: tier2(t, False),
        "t2p": lambda t: tier2(t, True),
        "topk": lambda t: topk_features(t, k),
    }[tier]
    return np.stack([fn(t) for t in traces])


# ---------------------------------------------------------------------- feature matrix files


@dataclass
class FeatureMatrix:
    tier: str
    values: np.ndarray  # [n, dim] float32
    index: list[tuple[int, int, int]] = field(default_factory=list)  # (seq_id, position, token_id)


def write_matrix(path: str | Path, fm: FeatureMatrix) -> None:
    """Write the HFFM matrix and, when an index is present, ``<path>.index.tsv``."""
    vals = np.ascontiguousarray(fm.values, dtype="<f4")
    if vals.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, TIERS[fm.tier]))
    buf.write(struct.pack("<QI", vals.shape[0], vals.shape[1]))
    buf.write(vals.tobytes())
    Path(path).write_bytes(buf.getvalue())
    if fm.index:
        with open(index_path(path), "w", encoding="utf-8") as fh:
            fh.write("row\tseq_id\tposition\ttoken_id\n")
            for i, (s, p, t) in enumerate(fm.index):
                fh.write(f"{i}\t{s}\t{p}\t{t}\n")


def index_path(path: str | Path) -> Path:
    return Path(str(path) + ".index.tsv")


def read_matrix(path: str | Path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a feature matrix file")
    version, tag = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported feature matrix version {version}")
    rows, dim = struct.unpack_from("<QI", blob, 12)
    need = 24 + 4 * rows * dim
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    tier = {v: k for k, v in TIERS.items()}.get(tag)
    if tier is None:
        raise ValueError(f"{path}: unknown tier tag {tag}")
    values = np.frombuffer(blob, dtype="<f4", offset=24).reshape(rows, dim).astype(np.float32)
    index = []
    ip = index_path(path)
    if ip.exists():
        for line in ip.read_text(encoding="utf-8").splitlines()[1:]:
            _, s, p, t = line.split("\t")
            index.append((int(s), int(p), int(t)))
    return FeatureMatrix(tier, values, index)


def trace_index(traces: Sequence[PredictionTrace]) -> list[tuple[int, int, int]]:
    return [(t.seq_id, t.position, -1 if t.ground_truth is None else t.ground_truth) for t in traces]
