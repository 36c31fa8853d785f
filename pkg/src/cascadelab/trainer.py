"""Corpus ingestion, AdamW with warmup + cosine decay, and paired PLS / C2 training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .model import DualStreamTransformer, ModelConfig, pls_loss
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

FORMATS = ("tokens_u32", "raw_bytes")


@dataclass
class TrainConfig:
    lr_peak: float = 3e-4
    weight_decay: float = 0.1
    batch_size: int = 64
    seq_len: int = 512
    warmup_steps: int = 1000
    total_steps: int = 10000
    clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} exceeds total_steps={self.total_steps}")
        for name in ("lr_peak", "batch_size", "seq_len", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("weight_decay, warmup_steps and total_steps must be non-negative")


@dataclass
class Corpus:
    token_ids: np.ndarray
    source: str = ""

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    def split(self, val_fraction: float = 0.05) -> tuple["Corpus", "Corpus"]:
        """Train on the leading part, validate on the final ``val_fraction``."""
        n_val = int(math.floor(len(self) * val_fraction))
        cut = len(self) - n_val
        return Corpus(self.token_ids[:cut], self.source), Corpus(self.token_ids[cut:], self.source)


def ingest(path: str | Path, format: str = "raw_bytes", vocab_size: int | None = None) -> Corpus:
    """Read a corpus file.

    ``tokens_u32`` holds little-endian u32 ids; ``raw_bytes`` maps every byte
    to the id equal to its value.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown corpus format {format!r}; expected one of {FORMATS}")
    blob = Path(path).read_bytes()
    if format == "raw_bytes":
        if vocab_size is not None and vocab_size < 256:
            raise ValueError(f"raw_bytes needs vocab_size >= 256, got {vocab_size}")
        ids = np.frombuffer(blob, dtype=np.uint8).astype(np.int64)
    else:
        if len(blob) % 4:
            raise ValueError(f"{path}: length {len(blob)} is not a multiple of 4 for tokens_u32")
        ids = np.frombuffer(blob, dtype="<u4").astype(np.int64)
        if vocab_size is not None and ids.size and ids.max() >= vocab_size:
            off = int(np.argmax(ids >= vocab_size))
            raise ValueError(f"{path}: token id {int(ids[off])} at byte offset {4 * off} >= vocab_size {vocab_size}")
    return Corpus(ids, str(path))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0 if cfg.total_steps > cfg.warmup_steps else cfg.lr_peak
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        coef = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(coef)
    return norm


class AdamW:
    """Adam with bias correction and decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class StepMetrics:
    step: int
    loss: float
    layer_ce: list[float]
    lr: float
    grad_norm: float

    def tsv(self) -> str:
        ce = "\t".join(f"{c:.6f}" for c in self.layer_ce)
        return f"{self.step}\t{self.loss:.6f}\t{ce}\t{self.lr:.6e}\t{self.grad_norm:.6f}"


def train_step(
    model: DualStreamTransformer,
    batch: np.ndarray,
    opt: AdamW,
    lr: float,
    clip_norm: float,
    rng: np.random.Generator | None = None,
    step: int = 0,
) -> StepMetrics:
    """Forward, PLS (or final-only) loss, backward, clip, AdamW update."""
    model.zero_grad()
    g = Graph()
    out = model.forward(batch, graph=g, train=rng is not None, rng=rng)
    loss, layer_ce = pls_loss(g, out.logits, batch, model.config)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite loss at step {step}")
    g.backward(loss)
    norm = clip_grad_norm(model.params, clip_norm)
    opt.step(lr)
    return StepMetrics(step, loss.item(), layer_ce, lr, norm)


class BatchSampler:
    """Random fixed-length windows; the order depends only on the seed."""

    def __init__(self, corpus: Corpus, batch_size: int, seq_len: int, seed: int):
        if len(corpus) < seq_len + 1:
            raise ValueError(f"corpus has {len(corpus)} tokens; need at least seq_len + 1 = {seq_len + 1}")
        self.ids = corpus.token_ids
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.rng = np.random.default_rng(seed)

    def next(self) -> np.ndarray:
        starts = self.rng.integers(0, len(self.ids) - self.seq_len + 1, size=self.batch_size)
        return np.stack([self.ids[s : s + self.seq_len] for s in starts])


def evaluate_layer_ce(model: DualStreamTransformer, corpus: Corpus, seq_len: int, max_windows: int = 64) -> list[float]:
    """Mean per-layer next-token CE over consecutive non-overlapping windows."""
    n = min(max_windows, len(corpus) // seq_len)
    if n == 0:
        raise ValueError("validation corpus shorter than one window")
    windows = corpus.token_ids[: n * seq_len].reshape(n, seq_len)
    sums = np.zeros(model.config.n_layers)
    for i in range(0, n, 16):
        chunk = windows[i : i + 16]
        out = model.forward(chunk)
        _, ce = pls_loss(Graph(record=False), out.logits, chunk, model.config)
        sums += np.asarray(ce) * chunk.shape[0]
    return list(sums / n)


def train(
    model: DualStreamTransformer,
    corpus: Corpus,
    cfg: TrainConfig,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> list[StepMetrics]:
    if len(corpus) == 0:
        raise ValueError("refusing to train on an empty corpus")
    sampler = BatchSampler(corpus, cfg.batch_size, cfg.seq_len, cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1) if model.config.dropout > 0 else None
    opt = AdamW(model.params, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)
    history = []
    for step in range(1, cfg.total_steps + 1):
        m = train_step(model, sampler.next(), opt, lr_at(step, cfg), cfg.clip_norm, dropout_rng, step)
        history.append(m)
        if on_step is not None:
            on_step(m)
    return history


def train_pair(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Train a PLS model and its C2 control from identical initial weights and batches.

    Writes ``pls.ckpt``, ``c2.ckpt`` and ``metrics_pls.tsv`` / ``metrics_c2.tsv``.
    """
    if len(corpus) == 0:
        raise ValueError("refusing to train on an empty corpus")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_split, _ = corpus.split(train_cfg.val_fraction)
    paths = []
    for tag, enabled in (("pls", True), ("c2", False)):
        cfg = model_cfg.replace(pls_enabled=enabled)
        model = DualStreamTransformer(cfg, seed=train_cfg.seed)
        metrics_path = out / f"metrics_{tag}.tsv"
        with metrics_path.open("w", encoding="utf-8") as fh:
            header = ["step", "loss"] + [f"ce_layer{l}" for l in range(cfg.n_layers)] + ["lr", "grad_norm"]
            fh.write("\t".join(header) + "\n")

            def write(m: StepMetrics, fh=fh, tag=tag):
                fh.write(m.tsv() + "\n")
                if m.step % 100 == 0 or m.step == train_cfg.total_steps:
                    log.info("%s step %d loss %.4f lr %.2e", tag, m.step, m.loss, m.lr)

            train(model, train_split, train_cfg, write)
        path = out / f"{tag}.ckpt"
        model.save(path)
        paths.append(path)
    return paths[0], paths[1]


def config_dict(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {"model": asdict(model_cfg), "train": asdict(train_cfg)}
