"""Task suites, head interventions, effect matrices and steering sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import DualStreamTransformer, InterventionSpec
from .synthetic import suite_lines

TASKS = ("capitalization", "gender", "winograd", "custom")
DEFAULT_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
DEFAULT_ON_TARGET = (("capitalization", "entity"), ("gender", "anchor"))


class SuiteError(ValueError):
    pass


@dataclass(frozen=True)
class TaskCase:
    context_ids: tuple[int, ...]
    correct_id: int
    incorrect_id: int | None = None
    task: str = "custom"


@dataclass
class CaseResult:
    p_baseline: float
    p_intervened: float
    p_incorrect_baseline: float | None = None
    p_incorrect_intervened: float | None = None

    @property
    def delta(self) -> float:
        return self.p_intervened - self.p_baseline

    @property
    def contrast_delta(self) -> float | None:
        """Change in P(correct) - P(incorrect), when an incorrect id is known."""
        if self.p_incorrect_baseline is None:
            return None
        return (self.p_intervened - self.p_incorrect_intervened) - (self.p_baseline - self.p_incorrect_baseline)


def parse_suite(text: str, vocab_size: int | None = None, source: str = "<suite>") -> list[TaskCase]:
    cases = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\r").split("\t")
        if len(parts) not in (3, 4):
            raise SuiteError(f"{source}:{lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}")
        task = parts[0]
        if task not in TASKS:
            raise SuiteError(f"{source}:{lineno}: unknown task {task!r}")
        try:
            ctx = tuple(int(v) for v in parts[1].split(","))
            correct = int(parts[2])
            incorrect = int(parts[3]) if len(parts) == 4 and parts[3] != "" else None
        except ValueError as exc:
            raise SuiteError(f"{source}:{lineno}: non-integer token id ({exc})") from None
        if len(ctx) < 2:
            raise SuiteError(f"{source}:{lineno}: context needs at least 2 tokens")
        ids = ctx + (correct,) + (() if incorrect is None else (incorrect,))
        if min(ids) < 0 or (vocab_size is not None and max(ids) >= vocab_size):
            raise SuiteError(f"{source}:{lineno}: token id outside [0, {vocab_size})")
        cases.append(TaskCase(ctx, correct, incorrect, task))
    return cases


def load_suite(path: str | Path, vocab_size: int | None = None) -> list[TaskCase]:
    """One case per line: ``task<TAB>ids<TAB>correct[<TAB>incorrect]``; blank and ``#`` lines skipped."""
    return parse_suite(Path(path).read_text(encoding="utf-8"), vocab_size, str(path))


def write_sample_suite(path: str | Path, seed: int = 0, n_cap: int = 8, n_gender: int = 16, n_winograd: int = 50) -> None:
    """Synthetic template suite for the byte-level tokenizer."""
    lines = ["# synthetic template suite (byte ids)"] + suite_lines(seed, n_cap, n_gender, n_winograd)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_by_task(cases: Iterable[TaskCase]) -> dict[str, list[TaskCase]]:
    out: dict[str, list[TaskCase]] = {}
    for c in cases:
        out.setdefault(c.task, []).append(c)
    return out


# ---------------------------------------------------------------------- evaluation


def final_distribution(
    model: DualStreamTransformer, context_ids: Sequence[int], spec: InterventionSpec | None = None
) -> np.ndarray:
    """Final-layer next-token distribution at the last context position (float64)."""
    last = model.config.n_layers - 1
    ids = np.asarray(context_ids, dtype=np.int64)[None, :]
    if ids.shape[1] > model.config.max_seq_len:
        ids = ids[:, -model.config.max_seq_len :]
    out = model.forward(ids, intervention=spec, with_logits={last})
    z = out.logits[last].data[0, -1].astype(np.float64)
    p = np.exp(z - z.max())
    return p / p.sum()


def run_case(model: DualStreamTransformer, case: TaskCase, spec: InterventionSpec | None = None) -> CaseResult:
    base = final_distribution(model, case.context_ids)
    inter = base if spec is None else final_distribution(model, case.context_ids, spec)
    inc = case.incorrect_id
    return CaseResult(
        float(base[case.correct_id]),
        float(inter[case.correct_id]),
        None if inc is None else float(base[inc]),
        None if inc is None else float(inter[inc]),
    )


def run_suite(
    model: DualStreamTransformer, cases: Sequence[TaskCase], spec: InterventionSpec | None = None
) -> list[CaseResult]:
    return [run_case(model, c, spec) for c in cases]


@dataclass
class SuiteStats:
    mean: float
    std: float
    deltas: list[float]

    @property
    def mean_pct(self) -> float:
        return 100.0 * self.mean

    @property
    def std_pct(self) -> float:
        return 100.0 * self.std


def suite_stats(results: Sequence[CaseResult]) -> SuiteStats:
    """Mean and sample standard deviation (n - 1) of per-case deltas."""
    if not results:
        raise ValueError("no case results to summarize")
    d = np.array([r.delta for r in results], dtype=np.float64)
    # Sorting makes the sums independent of case order.
    s = np.sort(d)
    mean = float(s.sum() / s.size)
    std = float(np.sqrt(np.sort((s - mean) ** 2).sum() / (s.size - 1))) if s.size > 1 else 0.0
    return SuiteStats(mean, std, d.tolist())


@dataclass
class EffectMatrix:
    tasks: list[str]
    groups: list[str]
    values: np.ndarray  # [tasks, groups], mean delta
    diagonality: float

    def tsv(self) -> str:
        lines = ["task\t" + "\t".join(self.groups)]
        for i, t in enumerate(self.tasks):
            lines.append(t + "\t" + "\t".join(f"{100.0 * v:.4f}" for v in self.values[i]))
        return "\n".join(lines) + "\n"


def diagonality_score(
    values: np.ndarray, tasks: Sequence[str], groups: Sequence[str], on_target: Iterable[tuple[str, str]]
) -> float:
    """Mean |delta| of on-target cells over mean |delta| of the others (inf if the others are all 0)."""
    pairs = set(on_target)
    on, off = [], []
    for i, t in enumerate(tasks):
        for j, g in enumerate(groups):
            (on if (t, g) in pairs else off).append(abs(values[i, j]))
    if not on:
        return float("nan")
    num = float(np.mean(on))
    den = float(np.mean(off)) if off else 0.0
    if den == 0.0:
        return float("inf") if num > 0 else float("nan")
    return num / den


def effect_matrix(
    model: DualStreamTransformer,
    suites: Mapping[str, Sequence[TaskCase]],
    head_groups: Mapping[str, Iterable[tuple[int, int]]],
    on_target: Iterable[tuple[str, str]] = DEFAULT_ON_TARGET,
) -> EffectMatrix:
    """Mean delta per task with each head group fully ablated."""
    tasks = list(suites)
    groups = list(head_groups)
    values = np.zeros((len(tasks), len(groups)))
    for j, name in enumerate(groups):
        targets = list(head_groups[name])
        if not targets:
            continue
        spec = InterventionSpec(targets, 0.0)
        for i, task in enumerate(tasks):
            values[i, j] = suite_stats(run_suite(model, suites[task], spec)).mean
    return EffectMatrix(tasks, groups, values, diagonality_score(values, tasks, groups, on_target))


@dataclass
class SteeringCurve:
    grid: list[float]
    mean_p: list[float]
    per_case: list[list[float]] = field(default_factory=list)

    @property
    def control_range(self) -> float:
        return float(max(self.mean_p) - min(self.mean_p))

    def tsv(self) -> str:
        return "scale\tmean_p_correct\n" + "".join(f"{s:g}\t{p:.8f}\n" for s, p in zip(self.grid, self.mean_p))


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    return [float(v) for v in text.split(",")]


def steering_sweep(
    model: DualStreamTransformer,
    suite: Sequence[TaskCase],
    targets: Iterable[tuple[int, int]],
    grid: Sequence[float] = DEFAULT_GRID,
) -> SteeringCurve:
    """Mean P(correct) over the suite while the target heads are scaled by each grid value."""
    grid = [float(s) for s in grid]
    if any(s < 0 or s > 1.5 for s in grid):
        raise ValueError("grid values must lie in [0, 1.5]")
    if 0.0 not in grid or 1.0 not in grid:
        raise ValueError("grid must include 0 and 1")
    if not suite:
        raise ValueError("empty suite")
    targets = list(targets)
    per_case = []
    for s in grid:
        spec = InterventionSpec(targets, s)
        per_case.append([float(final_distribution(model, c.context_ids, spec)[c.correct_id]) for c in suite])
    mean_p = [float(np.sort(np.array(p)).sum() / len(p)) for p in per_case]
    return SteeringCurve(grid, mean_p, per_case)
