"""Command-line entry point: train, trace, features, cluster, ari, ablate, steer, report."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import causal, clustering, features, trace, trainer
from .model import DualStreamTransformer, ModelConfig
from .synthetic import generate_text

log = logging.getLogger("cascadelab")

MANIFEST = "manifest.json"


# ---------------------------------------------------------------------- config and manifest


def read_config(path: str | Path | None) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    if path is None:
        return {}
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value: Any, like: Any) -> Any:
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def resolve(args: argparse.Namespace, cfg: dict[str, str], key: str, default: Any) -> Any:
    """Flag if given, else config file, else the built-in default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return _coerce(flag, default)
    if key in cfg:
        return _coerce(cfg[key], default)
    return default


def _dataclass_from(cls, args, cfg, base=None):
    base = base or cls()
    return cls(**{f.name: resolve(args, cfg, f.name, getattr(base, f.name)) for f in fields(cls)})


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str | Path, command: str, config: dict, seeds: dict, inputs: list[str | Path] = ()) -> Path:
    """Create or update the single manifest of ``out_dir`` and rehash every file in it."""
    out = Path(out_dir)
    path = out / MANIFEST
    old = json.loads(path.read_text()) if path.exists() else {}
    now = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    runs = old.get("runs", [])
    runs.append({"command": command, "config": config, "seeds": seeds, "finished": now})
    files = {p.name: sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != MANIFEST}
    manifest = {
        "tool": "cascadelab",
        "version": __version__,
        "created": old.get("created", now),
        "updated": now,
        "runs": runs,
        "files": files,
        "inputs": {str(p): sha256(p) for p in inputs},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def parse_heads(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        layer, sep, head = item.partition(":")
        if not sep:
            raise ValueError(f"head {item!r} is not in layer:head form")
        out.append((int(layer), int(head)))
    return out


def head_groups(groups: features.HeadGroups) -> dict[str, list[tuple[int, int]]]:
    return {"entity": list(groups.entity), "anchor": list(groups.anchor)}


def _targets(args, cfg) -> list[tuple[int, int]]:
    if args.heads and args.groups:
        raise ValueError("give either --heads or --groups, not both")
    if args.heads:
        return parse_heads(args.heads)
    known = head_groups(_groups(cfg))
    names = (args.groups or "entity").split(",")
    out = []
    for n in names:
        if n not in known:
            raise ValueError(f"unknown head group {n!r}; expected one of {sorted(known)}")
        out.extend(known[n])
    return out


def _groups(cfg: dict[str, str]) -> features.HeadGroups:
    base = features.HeadGroups()
    anchor = parse_heads(cfg["anchor_heads"]) if "anchor_heads" in cfg else base.anchor
    entity = parse_heads(cfg["entity_heads"]) if "entity_heads" in cfg else base.entity
    return features.HeadGroups(tuple(anchor), tuple(entity))


def _load_corpus(args, cfg, vocab_size: int) -> trainer.Corpus:
    path = resolve(args, cfg, "corpus", "")
    if not path:
        n = resolve(args, cfg, "synthetic_bytes", 0)
        if n <= 0:
            raise ValueError("no corpus given (use --corpus or --synthetic-bytes)")
        text = generate_text(n, resolve(args, cfg, "seed", 0))
        return trainer.Corpus(np.frombuffer(text.encode("ascii"), dtype=np.uint8).astype(np.int64), "synthetic")
    return trainer.ingest(path, resolve(args, cfg, "format", "raw_bytes"), vocab_size)


# ---------------------------------------------------------------------- subcommands


def cmd_train(args, cfg) -> int:
    model_cfg = _dataclass_from(ModelConfig, args, cfg)
    train_cfg = _dataclass_from(trainer.TrainConfig, args, cfg)
    corpus = _load_corpus(args, cfg, model_cfg.vocab_size)
    out = Path(args.out)
    trainer.train_pair(model_cfg, train_cfg, corpus, out)
    inputs = [corpus.source] if corpus.source and Path(corpus.source).is_file() else []
    write_manifest(out, "train", trainer.config_dict(model_cfg, train_cfg), {"seed": train_cfg.seed}, inputs)
    print(f"wrote {out / 'pls.ckpt'} and {out / 'c2.ckpt'}")
    return 0


def cmd_trace(args, cfg) -> int:
    model = DualStreamTransformer.load(args.model)
    mc = model.config
    corpus = _load_corpus(args, cfg, mc.vocab_size)
    split = resolve(args, cfg, "split", "val")
    train_part, val_part = corpus.split(resolve(args, cfg, "val_fraction", 0.05))
    ids = {"val": val_part, "train": train_part, "all": corpus}[split].token_ids
    seq_len = resolve(args, cfg, "seq_len", mc.max_seq_len)
    n_windows = resolve(args, cfg, "windows", 64)
    per_window = resolve(args, cfg, "per_window", 16)
    seed = resolve(args, cfg, "seed", 0)
    baseline = resolve(args, cfg, "baseline_layer", mc.n_layers - 1)
    if len(ids) < seq_len:
        raise ValueError(f"corpus split has {len(ids)} tokens, fewer than seq_len={seq_len}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(ids) - seq_len + 1, size=n_windows)
    windows = np.stack([ids[s : s + seq_len] for s in starts])
    k = min(per_window, seq_len - 1)
    positions = [sorted(rng.choice(np.arange(1, seq_len), size=k, replace=False).tolist()) for _ in range(n_windows)]
    traces = []
    for i in range(0, n_windows, 8):
        traces += trace.capture_batch(model, windows[i : i + 8], positions[i : i + 8], baseline, range(i, i + 8))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace.write_traces(out, traces, trace.header_for(model, baseline))
    write_manifest(
        out.parent,
        "trace",
        {"model": args.model, "seq_len": seq_len, "windows": n_windows, "per_window": k, "split": split},
        {"seed": seed},
        [args.model],
    )
    print(f"wrote {len(traces)} traces to {out}")
    return 0


def cmd_features(args, cfg) -> int:
    tier = resolve(args, cfg, "tier", "t2")
    k = resolve(args, cfg, "topk", 5)
    _, traces = trace.read_traces(args.inp)
    mat = features.extract(traces, tier, _groups(cfg), k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    features.write_matrix(out, features.FeatureMatrix(tier, mat.astype(np.float32), features.trace_index(traces)))
    write_manifest(out.parent, "features", {"tier": tier, "k": k, "in": args.inp}, {}, [args.inp])
    print(f"wrote {mat.shape[0]} x {mat.shape[1]} {tier} features to {out}")
    return 0


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path: str | Path) -> np.ndarray:
    lines = [s for s in Path(path).read_text().split() if s]
    return np.array([int(s) for s in lines], dtype=np.int64)


def cmd_cluster(args, cfg) -> int:
    algo = resolve(args, cfg, "algo", "kmeans")
    seed = resolve(args, cfg, "seed", 0)
    fm = features.read_matrix(args.inp)
    x = fm.values.astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params: dict[str, Any] = {"algo": algo, "in": args.inp}
    if algo == "kmeans":
        k = resolve(args, cfg, "k", 10)
        if resolve(args, cfg, "standardize", False):
            x = clustering.standardize(x)
        res = clustering.kmeans(x, k=k, seed=seed)
        params.update(k=k, inertia=res.inertia)
    elif algo == "hdbscan":
        m = resolve(args, cfg, "pca", 30)
        x = clustering.standardize(x)
        if m > 0:
            pca, x = clustering.pca_fit_project(x, min(m, *x.shape))
            params["pca_variance"] = pca.cumulative_variance
        mcs = resolve(args, cfg, "min_cluster_size", 10)
        ms = resolve(args, cfg, "min_samples", 1)
        res = clustering.hdbscan(x, mcs, ms)
        params.update(min_cluster_size=mcs, min_samples=ms)
    else:
        raise ValueError(f"unknown algorithm {algo!r}; expected kmeans or hdbscan")
    write_labels(out / "labels.txt", res.labels)
    z = clustering.pca_2d(fm.values.astype(np.float64)) if fm.values.shape[0] >= 2 else np.zeros((0, 2))
    with open(out / "pca2d.tsv", "w") as fh:
        fh.write("row\tpc1\tpc2\tlabel\n")
        for i, lab in enumerate(res.labels):
            pc = list(z[i]) + [0.0] * (2 - z.shape[1])
            fh.write(f"{i}\t{pc[0]:.6f}\t{pc[1]:.6f}\t{int(lab)}\n")
    with open(out / "clusters.tsv", "w") as fh:
        fh.write("cluster\tsize\tmean_k_star\tdiverse_rows\n")
        for c in sorted(set(res.labels.tolist()) - {-1}):
            members = res.labels == c
            kstar = float(clustering.k_star_column(fm.values[members]).mean()) if fm.tier != "t1" else float("nan")
            rows = clustering.diverse_samples(x, res.labels, c)
            fh.write(f"{c}\t{int(members.sum())}\t{kstar:.4f}\t{','.join(map(str, rows))}\n")
    write_manifest(out, "cluster", params, {"seed": seed}, [args.inp])
    print(f"{algo}: {res.n_clusters} clusters, noise fraction {res.noise_fraction:.3f}")
    return 0


def cmd_ari(args, cfg) -> int:
    a, b = read_labels(args.a), read_labels(args.b)
    print(repr(float(clustering.adjusted_rand_index(a, b))))
    return 0


def _case_table(cases, results) -> str:
    lines = ["case\ttask\tp_baseline\tp_intervened\tdelta"]
    for i, (c, r) in enumerate(zip(cases, results)):
        lines.append(f"{i}\t{c.task}\t{r.p_baseline:.8f}\t{r.p_intervened:.8f}\t{r.delta:.8f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg) -> int:
    model = DualStreamTransformer.load(args.model)
    cases = causal.load_suite(args.suite, model.config.vocab_size)
    task = resolve(args, cfg, "task", "")
    if task:
        cases = [c for c in cases if c.task == task]
    targets = _targets(args, cfg)
    scale = resolve(args, cfg, "scale", 0.0)
    spec = causal.InterventionSpec(targets, scale)
    results = causal.run_suite(model, cases, spec)
    stats = causal.suite_stats(results)
    table = _case_table(cases, results)
    summary = f"# n={len(results)}\tmean_delta_pct={stats.mean_pct:.4f}\tstd_delta_pct={stats.std_pct:.4f}\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + summary)
        write_manifest(out.parent, "ablate", {"heads": targets, "scale": scale, "suite": args.suite}, {}, [args.model, args.suite])
    sys.stdout.write(table + summary)
    return 0


def cmd_steer(args, cfg) -> int:
    model = DualStreamTransformer.load(args.model)
    cases = causal.load_suite(args.suite, model.config.vocab_size)
    task = resolve(args, cfg, "task", "")
    if task:
        cases = [c for c in cases if c.task == task]
    grid = causal.parse_grid(resolve(args, cfg, "grid", "0:1.5:0.25"))
    curve = causal.steering_sweep(model, cases, _targets(args, cfg), grid)
    text = curve.tsv() + f"# control_range={curve.control_range:.8f}\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_manifest(out.parent, "steer", {"grid": grid, "suite": args.suite}, {}, [args.model, args.suite])
    sys.stdout.write(text)
    return 0


def cmd_report(args, cfg) -> int:
    run = Path(args.dir)
    if not run.is_dir():
        raise FileNotFoundError(f"{run} is not a directory")
    groups = head_groups(_groups(cfg))
    depth_lines = ["source\tearly\tmiddle\tlate\tn"]
    for path in sorted(run.glob("*.bin")):
        try:
            fm = features.read_matrix(path)
        except ValueError:
            continue
        if fm.tier == "t1" or fm.values.shape[0] == 0:
            continue
        d = clustering.depth_distribution(clustering.k_star_column(fm.values))
        depth_lines.append(f"{path.stem}\t{d['early']:.4f}\t{d['middle']:.4f}\t{d['late']:.4f}\t{fm.values.shape[0]}")
    (run / "depth.tsv").write_text("\n".join(depth_lines) + "\n")
    print("\n".join(depth_lines))
    suite = Path(args.suite) if args.suite else run / "suite.tsv"
    if suite.exists():
        for ckpt in sorted(run.glob("*.ckpt")):
            model = DualStreamTransformer.load(ckpt)
            suites = causal.split_by_task(causal.load_suite(suite, model.config.vocab_size))
            em = causal.effect_matrix(model, suites, groups)
            (run / f"effect_{ckpt.stem}.tsv").write_text(em.tsv())
            print(f"# effect matrix (mean delta %) for {ckpt.stem}, diagonality {em.diagonality:.3f}")
            sys.stdout.write(em.tsv())
    write_manifest(run, "report", {"suite": str(suite)}, {})
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadelab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file; flags override it")
        sp.add_argument("--seed", type=int)
        return sp

    t = common(sub.add_parser("train", help="train a PLS model and its C2 control"))
    t.add_argument("--out", required=True)
    t.add_argument("--corpus")
    t.add_argument("--format", choices=trainer.FORMATS)
    t.add_argument("--synthetic-bytes", dest="synthetic_bytes", type=int)
    for f in fields(ModelConfig):
        t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=str)
    for f in fields(trainer.TrainConfig):
        if f.name != "seed":
            t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=str)

    tr = common(sub.add_parser("trace", help="capture prediction traces"))
    tr.add_argument("--model", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--corpus")
    tr.add_argument("--format", choices=trainer.FORMATS)
    tr.add_argument("--synthetic-bytes", dest="synthetic_bytes", type=int)
    tr.add_argument("--split", choices=("val", "train", "all"))
    tr.add_argument("--seq-len", dest="seq_len", type=int)
    tr.add_argument("--windows", type=int)
    tr.add_argument("--per-window", dest="per_window", type=int)
    tr.add_argument("--baseline-layer", dest="baseline_layer", type=int)

    fe = common(sub.add_parser("features", help="extract feature matrices from traces"))
    fe.add_argument("--tier", choices=sorted(features.TIERS))
    fe.add_argument("--topk", type=int)
    fe.add_argument("--in", dest="inp", required=True)
    fe.add_argument("--out", required=True)

    cl = common(sub.add_parser("cluster", help="k-means or HDBSCAN over a feature matrix"))
    cl.add_argument("--algo", choices=("kmeans", "hdbscan"))
    cl.add_argument("--in", dest="inp", required=True)
    cl.add_argument("--out", required=True)
    cl.add_argument("--k", type=int)
    cl.add_argument("--standardize", action="store_const", const=True)
    cl.add_argument("--pca", type=int)
    cl.add_argument("--min-cluster-size", dest="min_cluster_size", type=int)
    cl.add_argument("--min-samples", dest="min_samples", type=int)

    ar = common(sub.add_parser("ari", help="adjusted Rand index of two label files"))
    ar.add_argument("--a", required=True)
    ar.add_argument("--b", required=True)

    for name, helptext in (("ablate", "per-case deltas under a head intervention"), ("steer", "scale sweep")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--model", required=True)
        sp.add_argument("--suite", required=True)
        sp.add_argument("--heads", help="comma-separated layer:head pairs, e.g. 5:4,5:5")
        sp.add_argument("--groups", help="named head groups, e.g. entity or anchor,entity")
        sp.add_argument("--task")
        sp.add_argument("--out")
        if name == "ablate":
            sp.add_argument("--scale", type=float)
        else:
            sp.add_argument("--grid", help="start:stop:step or comma-separated scales")

    rp = common(sub.add_parser("report", help="depth table and effect matrices for a run directory"))
    rp.add_argument("--dir", required=True)
    rp.add_argument("--suite")
    return p


COMMANDS = {
    "train": cmd_train,
    "trace": cmd_trace,
    "features": cmd_features,
    "cluster": cmd_cluster,
    "ari": cmd_ari,
    "ablate": cmd_ablate,
    "steer": cmd_steer,
    "report": cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    """Run one subcommand; 0 on success, 2 on usage errors, 1 on runtime errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = read_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, IndexError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
