"""Standardization, PCA, k-means, HDBSCAN, ARI and cluster reports."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SIGMA_FLOOR = 1e-12


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    n_clusters: int
    algorithm: str
    params: dict = field(default_factory=dict)
    inertia: float | None = None

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(self.labels == -1)) if self.labels.size else 0.0


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # [m, D], orthonormal rows
    explained_variance_ratio: np.ndarray

    @property
    def cumulative_variance(self) -> float:
        return float(self.explained_variance_ratio.sum())

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components + self.mean


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-column zero mean and unit (population) variance; constant columns become 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"standardize needs at least 2 rows, got shape {x.shape}")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    ok = sd >= SIGMA_FLOOR
    out[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return out


def pca_fit_project(x: np.ndarray, m: int = 30) -> tuple[PcaModel, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if m > min(n, d):
        raise ValueError(f"cannot keep {m} components from a {n} x {d} matrix")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2 / max(n - 1, 1)
    total = var.sum()
    if total <= 0:
        warnings.warn("PCA on data with zero variance; returning no components")
        return PcaModel(mean, np.zeros((0, d)), np.zeros(0)), np.zeros((n, 0))
    ratio = var / total
    rank = int(np.sum(ratio > 1e-12))
    if rank < m:
        warnings.warn(f"data has rank {rank} < {m}; keeping {rank} components")
        m = rank
    # Sign convention: largest-magnitude loading of each axis is positive.
    comps = vt[:m].copy()
    signs = np.sign(comps[np.arange(m), np.argmax(np.abs(comps), axis=1)])
    comps *= signs[:, None]
    model = PcaModel(mean, comps, ratio[:m])
    return model, model.transform(x)


# ---------------------------------------------------------------------- k-means


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _inertia(x: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    diff = x - centers[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, np.ndarray, list[float]]:
    history = []
    k = centers.shape[0]
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        labels = d.argmin(axis=1)
        history.append(_inertia(x, centers, labels))
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point worst served by its center.
                far = int(np.argmax(d[np.arange(x.shape[0]), labels]))
                new[j] = x[far]
                labels[far] = j
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    labels = _sq_dists(x, centers).argmin(axis=1)
    history.append(_inertia(x, centers, labels))
    return labels, centers, history


def kmeans(
    x: np.ndarray, k: int = 10, seed: int = 0, n_init: int = 10, max_iter: int = 300, tol: float = 1e-6
) -> ClusterAssignment:
    """k-means++ seeding and Lloyd iterations; best of ``n_init`` restarts by inertia."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, history = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centers, history)
    labels, centers, history = best
    return ClusterAssignment(
        labels.astype(np.int64),
        k,
        "kmeans",
        {"k": k, "seed": seed, "n_init": n_init, "centers": centers, "history": history},
        inertia=history[-1],
    )


# ---------------------------------------------------------------------- HDBSCAN


def _row_distances(x: np.ndarray, i: int) -> np.ndarray:
    # Difference form rather than the expanded dot-product form: d(i, j) is then
    # bit-identical from either side, which keeps tie structure independent of row order.
    diff = x - x[i]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def core_distances(x: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the ``min_samples``-th nearest point, counting the point itself."""
    n = x.shape[0]
    if min_samples <= 1:
        return np.zeros(n)
    kth = min(min_samples, n) - 1
    return np.array([np.partition(_row_distances(x, i), kth)[kth] for i in range(n)])


def mutual_reachability_mst(x: np.ndarray, min_samples: int) -> np.ndarray:
    """Prim's algorithm over the complete mutual-reachability graph; returns [n-1, 3] (a, b, weight)."""
    n = x.shape[0]
    core = core_distances(x, min_samples)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    current = 0
    in_tree[0] = True
    for e in range(n - 1):
        d = np.maximum(_row_distances(x, current), np.maximum(core, core[current]))
        better = (~in_tree) & (d < best)
        best[better] = d[better]
        parent[better] = current
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        edges[e] = (parent[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        current = nxt
    return edges


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Merge tree from MST edges: rows (left, right, distance, size); merge i creates node n + i."""
    order = np.argsort(mst[:, 2], kind="stable")
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    out = np.empty((n - 1, 4))
    for i, e in enumerate(order):
        a, b, w = int(mst[e, 0]), int(mst[e, 1]), mst[e, 2]
        ra, rb = find(a), find(b)
        node = n + i
        parent[ra] = parent[rb] = node
        size[node] = size[ra] + size[rb]
        out[i] = (ra, rb, w, size[node])
    return out


def condense_tree(hierarchy: np.ndarray, min_cluster_size: int) -> list[tuple[int, int, float, int]]:
    """Condensed cluster tree as (parent, child, lambda, child_size) rows.

    Points are 0 .. n-1; the root cluster is n and new clusters count up from n+1.
    Merges at exactly equal distance are treated as one multi-way split, so the
    tree does not depend on how ties were ordered in the spanning tree.
    """
    n = hierarchy.shape[0] + 1
    root = 2 * n - 2

    def size_of(node):
        return 1 if node < n else int(hierarchy[node - n, 3])

    def leaves(node):
        stack, out = [node], []
        while stack:
            c = stack.pop()
            if c < n:
                out.append(c)
            else:
                stack.extend((int(hierarchy[c - n, 0]), int(hierarchy[c - n, 1])))
        return out

    def parts(node):
        """Components left after removing every edge of this node's merge distance."""
        dist = hierarchy[node - n, 2]
        stack, out = [node], []
        while stack:
            c = stack.pop()
            if c >= n and hierarchy[c - n, 2] == dist:
                stack.extend((int(hierarchy[c - n, 0]), int(hierarchy[c - n, 1])))
            else:
                out.append(c)
        return out

    first_leaf = np.arange(2 * n - 1)
    for i in range(n - 1):
        first_leaf[n + i] = min(first_leaf[int(hierarchy[i, 0])], first_leaf[int(hierarchy[i, 1])])

    relabel = {root: n}
    next_label = n + 1
    rows: list[tuple[int, int, float, int]] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node < n:
            continue
        dist = hierarchy[node - n, 2]
        lam = 1.0 / dist if dist > 0 else np.inf
        pieces = parts(node)
        # Order pieces by their smallest point so numbering ignores merge order.
        pieces.sort(key=lambda c: first_leaf[c])
        big = [c for c in pieces if size_of(c) >= min_cluster_size]
        parent_label = relabel[node]
        for c in pieces:
            if c in big:
                continue
            rows.extend((parent_label, p, lam, 1) for p in sorted(leaves(c)))
        if len(big) == 1:
            relabel[big[0]] = parent_label
            stack.append(big[0])
        elif len(big) > 1:
            for c in big:
                relabel[c] = next_label
                rows.append((parent_label, next_label, lam, size_of(c)))
                next_label += 1
                stack.append(c)
    return rows


def _select_eom(rows, n: int, allow_single_cluster: bool) -> tuple[set[int], dict[int, float]]:
    births = {n: 0.0}
    for parent, child, lam, size in rows:
        if size > 1 or child >= n:
            births[child] = lam
    stability = {c: 0.0 for c in births}
    for parent, child, lam, size in rows:
        stability[parent] += (lam - births[parent]) * size
    children: dict[int, list[int]] = {c: [] for c in births}
    for parent, child, lam, size in rows:
        if child >= n:
            children[parent].append(child)
    nodes = sorted(births, reverse=True)
    if not allow_single_cluster:
        nodes = [c for c in nodes if c != n]
    selected = {c: True for c in nodes}
    for node in nodes:
        sub = sum(stability[c] for c in children[node])
        if sub > stability[node]:
            selected[node] = False
            stability[node] = sub
        else:
            stack = list(children[node])
            while stack:
                c = stack.pop()
                if c in selected:
                    selected[c] = False
                stack.extend(children[c])
    return {c for c, v in selected.items() if v}, stability


def hdbscan(
    x: np.ndarray, min_cluster_size: int = 10, min_samples: int = 1, allow_single_cluster: bool = False
) -> ClusterAssignment:
    """HDBSCAN* with excess-of-mass selection; noise is labelled -1."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    params = {"min_cluster_size": min_cluster_size, "min_samples": min_samples}
    if n <= min_cluster_size or n < 2:
        return ClusterAssignment(np.full(n, -1, dtype=np.int64), 0, "hdbscan", params)
    mst = mutual_reachability_mst(x, min_samples)
    rows = condense_tree(single_linkage(mst, n), min_cluster_size)
    chosen, _ = _select_eom(rows, n, allow_single_cluster)

    # Union along tree edges that do not enter a selected cluster; each point's
    # representative is then its selected cluster, or the root for noise.
    parent_of = {}
    for parent, child, lam, size in rows:
        if child not in chosen:
            parent_of[child] = parent

    def top(c):
        while c in parent_of:
            c = parent_of[c]
        return c

    mapping = {c: i for i, c in enumerate(sorted(chosen))}
    labels = np.full(n, -1, dtype=np.int64)
    for p in range(n):
        c = top(p)
        if c in mapping:
            labels[p] = mapping[c]
        elif c == n and allow_single_cluster and len(chosen) == 1 and n in chosen:
            labels[p] = 0
    return ClusterAssignment(labels, len(chosen), "hdbscan", params)


# ---------------------------------------------------------------------- agreement and reports


def _comb2(v: np.ndarray) -> float:
    v = v.astype(np.float64)
    return float((v * (v - 1) / 2.0).sum())


def adjusted_rand_index(a: Sequence[int], b: Sequence[int]) -> float:
    """Hubert-Arabie adjusted Rand index; noise (-1) counts as an ordinary class."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_ij = _comb2(table.ravel())
    sum_a = _comb2(table.sum(axis=1))
    sum_b = _comb2(table.sum(axis=0))
    expected = sum_a * sum_b / (n * (n - 1) / 2.0)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


DEPTH_BINS = (("early", (0, 1)), ("middle", (2, 3, 4)), ("late", None))


def depth_distribution(k_star: Sequence[float]) -> dict[str, float]:
    """Fractions of predictions stabilizing early (0-1), middle (2-4) and late (>= 5)."""
    k = np.asarray(k_star, dtype=np.float64)
    if k.size == 0:
        raise ValueError("no predictions to bin")
    early = np.isin(k, (0, 1))
    middle = np.isin(k, (2, 3, 4))
    late = k >= 5
    return {"early": float(early.mean()), "middle": float(middle.mean()), "late": float(late.mean())}


def k_star_column(features: np.ndarray, n_layers: int = 6) -> np.ndarray:
    """k* lives right after the trajectory block (index 17 at L = 6)."""
    return np.asarray(features)[:, 3 * n_layers - 1]


def diverse_samples(x: np.ndarray, labels: np.ndarray, cluster: int, count: int = 15) -> list[int]:
    """Greedy max-min selection inside one cluster, starting from its medoid."""
    idx = np.flatnonzero(np.asarray(labels) == cluster)
    if idx.size == 0:
        raise ValueError(f"cluster {cluster} is empty")
    pts = np.asarray(x, dtype=np.float64)[idx]
    sq = (pts * pts).sum(axis=1)
    d = np.sqrt(np.maximum(sq[:, None] - 2.0 * pts @ pts.T + sq[None, :], 0.0))
    np.fill_diagonal(d, 0.0)
    chosen = [int(np.argmin(d.sum(axis=1)))]
    mind = d[chosen[0]].copy()
    while len(chosen) < min(count, idx.size):
        mind[chosen] = -1.0
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, d[nxt])
    return [int(idx[c]) for c in chosen]


def raw_activation_baseline(raw: np.ndarray, engineered_labels: np.ndarray, k: int = 10, seed: int = 0) -> float:
    """ARI between k-means on raw activations and a clustering of engineered features."""
    raw_labels = kmeans(raw, k=k, seed=seed).labels
    return adjusted_rand_index(engineered_labels, raw_labels)


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-2 principal coordinates for plotting."""
    _, z = pca_fit_project(x, m=min(2, *np.asarray(x).shape))
    return z
