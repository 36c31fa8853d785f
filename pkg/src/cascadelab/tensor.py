"""Small dense-tensor library with tape-based reverse-mode differentiation.

Only the primitives the dual-stream transformer needs are provided. There is
no general broadcasting: bias-style adds may broadcast a trailing-shape operand
over leading axes, everything else requires matching shapes.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    # Backward rules may hand the same array to several inputs, so never add in place.
    t.grad = g if t.grad is None else t.grad + g


def _check_same(op: str, *ts: Tensor) -> None:
    shapes = [t.shape for t in ts]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"{op}: shape mismatch {shapes}")


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


class Graph:
    """Ordered tape of primitive operations.

    Every primitive records a node when any input requires a gradient.
    ``backward`` walks the tape once in reverse; a second call without
    ``reset`` raises.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self._backward_done = False

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self._backward_done = False

    def _emit(self, op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=needs)
        if needs:
            self.nodes.append(Node(out, inputs, backward, op))
        return out

    def backward(self, loss: Tensor) -> None:
        if self._backward_done:
            raise GraphError("backward already ran on this graph; call reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        self._backward_done = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    _accumulate(inp, gi)
            if node.out is not loss:
                node.out.grad = None

    # ------------------------------------------------------------------ primitives

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """``a + b``; ``b`` may match a trailing slice of ``a``'s shape (bias add)."""
        if a.shape == b.shape:
            return self._emit("add", a.data + b.data, (a, b), lambda g: (g, g))
        nb = b.data.ndim
        if nb == 0 or nb > a.data.ndim or a.shape[-nb:] != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        lead = tuple(range(a.data.ndim - nb))
        return self._emit("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same("sub", a, b)
        return self._emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same("mul", a, b)
        ad, bd = a.data, b.data
        return self._emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", a.data * c, (a,), lambda g: (g * c,))

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def square(self, a: Tensor) -> Tensor:
        ad = a.data
        return self._emit("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))

    def matmul(self, a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
        """``a @ b`` (or ``a @ b.T``).

        ``b`` is either a 2-D weight shared across ``a``'s leading axes or a
        batch with the same leading axes as ``a``.
        """
        ad, bd = a.data, b.data
        if bd.ndim == 2:
            k = bd.shape[1] if transpose_b else bd.shape[0]
            if ad.shape[-1] != k:
                raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}{'.T' if transpose_b else ''}")
            w = bd.T if transpose_b else bd
            out = ad @ w

            def back(g):
                ga = g @ w.T
                gw = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                return ga, (gw.T if transpose_b else gw)

            return self._emit("matmul", out, (a, b), back)

        if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        bt = np.swapaxes(bd, -1, -2) if transpose_b else bd
        if ad.shape[-1] != bt.shape[-2]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}{'.T' if transpose_b else ''}")
        out = ad @ bt

        def back_batched(g):
            ga = g @ np.swapaxes(bt, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return ga, (np.swapaxes(gb, -1, -2) if transpose_b else gb)

        return self._emit("bmm", out, (a, b), back_batched)

    def embedding(self, weight: Tensor, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        vocab = weight.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            bad = np.argwhere((ids < 0) | (ids >= vocab))[0]
            raise IndexError(f"token id {ids[tuple(bad)]} at position {tuple(int(i) for i in bad)} out of range for vocab {vocab}")

        def back(g):
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
            return (gw,)

        return self._emit("embedding", weight.data[ids], (weight,), back)

    def slice_rows(self, a: Tensor, n: int) -> Tensor:
        """First ``n`` rows of a 2-D tensor (position-embedding lookup)."""
        if a.data.ndim != 2 or n > a.shape[0]:
            raise ShapeError(f"slice_rows: cannot take {n} rows of {a.shape}")
        shape = a.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[:n] = g
            return (full,)

        return self._emit("slice_rows", a.data[:n], (a,), back)

    def drop_last_position(self, x: Tensor) -> Tensor:
        """[B, T, V] -> [B, T-1, V]; aligns logits with shifted targets."""
        shape = x.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[:, :-1] = g
            return (full,)

        return self._emit("drop_last_position", x.data[:, :-1], (x,), back)

    def split_heads(self, x: Tensor, n_heads: int) -> Tensor:
        """[B, T, d] -> [B, H, T, d/H]."""
        b, t, d = x.shape
        if d % n_heads:
            raise ShapeError(f"split_heads: width {d} not divisible by {n_heads} heads")
        dh = d // n_heads
        out = np.ascontiguousarray(x.data.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3))
        return self._emit("split_heads", out, (x,), lambda g: (g.transpose(0, 2, 1, 3).reshape(b, t, d),))

    def merge_heads(self, x: Tensor) -> Tensor:
        """[B, H, T, dh] -> [B, T, H*dh]."""
        b, h, t, dh = x.shape
        out = x.data.transpose(0, 2, 1, 3).reshape(b, t, h * dh)
        return self._emit("merge_heads", out, (x,), lambda g: (g.reshape(b, t, h, dh).transpose(0, 2, 1, 3),))

    def head_linear(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """Per-head affine map: x [B, H, T, dh], w [H, dh, dh], b [H, dh]."""
        if x.data.ndim != 4 or w.shape != (x.shape[1], x.shape[3], x.shape[3]) or b.shape != (x.shape[1], x.shape[3]):
            raise ShapeError(f"head_linear: shape mismatch x={x.shape} w={w.shape} b={b.shape}")
        xd, wd = x.data, w.data
        out = xd @ wd[None] + b.data[None, :, None, :]

        def back(g):
            gx = g @ np.swapaxes(wd, -1, -2)[None]
            gw = np.einsum("bhti,bhtj->hij", xd, g, optimize=True)
            gb = g.sum(axis=(0, 2))
            return gx, gw, gb

        return self._emit("head_linear", out, (x, w, b), back)

    def head_scale(self, x: Tensor, scales: np.ndarray) -> Tensor:
        """Multiply head ``h`` of x [B, H, T, dh] by the constant ``scales[h]``."""
        s = np.asarray(scales, dtype=x.dtype)
        if s.shape != (x.shape[1],):
            raise ShapeError(f"head_scale: need {x.shape[1]} scales, got shape {s.shape}")
        s4 = s[None, :, None, None]
        return self._emit("head_scale", x.data * s4, (x,), lambda g: (g * s4,))

    def causal_softmax(self, s: Tensor) -> Tensor:
        """Softmax over the last axis with future keys masked to exactly zero."""
        t = s.shape[-1]
        if s.shape[-2] != t:
            raise ShapeError(f"causal_softmax: scores must be square in the last two axes, got {s.shape}")
        y = s.data + _causal_bias(t, s.dtype)
        y -= y.max(axis=-1, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=-1, keepdims=True)

        def back(g):
            gy = g * y
            gy -= y * gy.sum(axis=-1, keepdims=True)
            return (gy,)

        return self._emit("causal_softmax", y, (s,), back)

    def softmax(self, s: Tensor) -> Tensor:
        m = s.data.max(axis=-1, keepdims=True)
        e = np.exp(s.data - m)
        y = e / e.sum(axis=-1, keepdims=True)
        return self._emit("softmax", y, (s,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))

    def sigmoid(self, x: Tensor) -> Tensor:
        y = _sigmoid(x.data)
        return self._emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))

    def gelu(self, x: Tensor) -> Tensor:
        """tanh-approximated GELU."""
        xd = x.data
        x2 = xd * xd
        th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
        y = 0.5 * xd * (1.0 + th)

        def back(g):
            du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            d = 1.0 - th * th
            d *= du
            d *= xd
            d += 1.0 + th
            d *= 0.5
            d *= g
            return (d,)

        return self._emit("gelu", y, (x,), back)

    def layernorm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(f"layernorm: affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
        xd = x.data
        mu = xd.mean(axis=-1, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        y = xhat * gamma.data + beta.data

        def back(g):
            lead = tuple(range(xd.ndim - 1))
            gg = (g * xhat).sum(axis=lead)
            gb = g.sum(axis=lead)
            gx_hat = g * gamma.data
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
            return gx, gg, gb

        return self._emit("layernorm", y, (x, gamma, beta), back)

    def cross_entropy(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        """Mean next-token cross-entropy; ``logits`` [..., V], ``targets`` [...]."""
        targets = np.asarray(targets, dtype=np.int64)
        v = logits.shape[-1]
        if logits.shape[:-1] != targets.shape:
            raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
        if targets.size == 0:
            raise ShapeError("cross_entropy: no targets")
        if targets.min() < 0 or targets.max() >= v:
            bad = int(np.argmax((targets < 0) | (targets >= v)))
            raise IndexError(f"target id {int(targets.reshape(-1)[bad])} at flat index {bad} out of range for vocab {v}")
        z = logits.data.reshape(-1, v)
        t = targets.reshape(-1)
        m = z.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
        n = t.shape[0]
        loss = (lse - z[np.arange(n), t]).mean()

        def back(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(n), t] -= 1.0
            return ((p * (g / n)).reshape(logits.shape),)

        return self._emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), back)

    def dropout(self, x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
        if p <= 0.0:
            return x
        keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
        return self._emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    y = np.tanh(0.5 * x)
    y += 1.0
    y *= 0.5
    return y


@functools.lru_cache(maxsize=32)
def _causal_bias_cached(t: int, dtype_str: str) -> np.ndarray:
    bias = np.zeros((t, t), dtype=np.dtype(dtype_str))
    bias[np.triu_indices(t, k=1)] = -np.inf
    bias.setflags(write=False)
    return bias


def _causal_bias(t: int, dtype) -> np.ndarray:
    return _causal_bias_cached(t, np.dtype(dtype).str)


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------- gradient checks


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    n_checked: int

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def finite_difference_check(
    params: dict[str, Tensor] | Iterable[Tensor],
    loss_fn: Callable[[Graph], Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-8,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` builds the loss on the graph it is given. Elementwise error is
    ``|a - n| / max(|a|, |n|)``; entries where both magnitudes are below
    ``abs_floor`` are compared absolutely instead. ``max_per_tensor`` limits the
    number of randomly chosen entries probed per tensor.
    """
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    g = Graph()
    loss = loss_fn(g)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    if loss.requires_grad:
        g.backward(loss)
    rng = np.random.default_rng(seed)
    nograd = Graph(record=False)
    per_tensor: dict[str, float] = {}
    worst = 0.0
    count = 0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        err_t = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn(nograd).item()
            flat[i] = orig - step
            lm = loss_fn(nograd).item()
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise FloatingPointError(f"loss is not finite while perturbing {name}[{i}]")
            num = (lp - lm) / (2 * step)
            ana = float(analytic.reshape(-1)[i])
            scale = max(abs(ana), abs(num))
            err = abs(ana - num) if scale < abs_floor else abs(ana - num) / scale
            err_t = max(err_t, err)
            count += 1
        per_tensor[name] = err_t
        worst = max(worst, err_t)
    return GradCheckReport(worst, per_tensor, count)


def parameter(data, name: str) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.asarray(data), requires_grad=True, name=name)
