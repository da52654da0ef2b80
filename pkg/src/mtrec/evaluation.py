"""Metrics (AUC, logloss, average AUC, MTL gain) and the negative-transfer
bucket-split protocol: per-task equal-frequency buckets of single-task scores,
bucket-index differences, and the three-way subset partition."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, ShapeError

SUBSET_NAMES = ("b_overwhelming", "comparable", "a_overwhelming")


class UndefinedMetricError(DataError):
    """AUC requested on single-class labels; callers report it as absent."""


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 * P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"auc: scores {scores.shape} vs labels {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"auc undefined: {n_pos} positives, {n_neg} negatives"
        )
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg_rank = (starts + ends + 1) / 2.0  # 1-based midrank per tie group
    ranks = avg_rank[inverse]
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """O(n^2) pairwise oracle for tests: wins + half ties over all pos-neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("auc undefined on single-class labels")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def logloss(scores, labels) -> float:
    """Mean binary cross-entropy with scores clamped into [1e-12, 1 - 1e-12]."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise DataError("logloss: empty input")
    if scores.shape != labels.shape:
        raise ShapeError(f"logloss: scores {scores.shape} vs labels {labels.shape}")
    p = np.clip(scores, 1e-12, 1.0 - 1e-12)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))))


@dataclass
class TaskMetrics:
    auc: float | None
    logloss: float


@dataclass
class MetricsReport:
    per_task: dict[int, TaskMetrics]
    average_auc: float
    mtl_gain: float | None = None


def compute_metrics(scores: dict[int, np.ndarray], labels: np.ndarray) -> MetricsReport:
    """Per-task AUC/logloss plus their average AUC; single-class AUC is absent."""
    per_task: dict[int, TaskMetrics] = {}
    for task in sorted(scores):
        y = labels[:, task]
        try:
            a = auc(scores[task], y)
        except UndefinedMetricError:
            a = None
        per_task[task] = TaskMetrics(a, logloss(scores[task], y))
    defined = [m.auc for m in per_task.values() if m.auc is not None]
    avg = float(np.mean(defined)) if defined else float("nan")
    return MetricsReport(per_task, avg)


def mtl_gain(model_report: MetricsReport, single_task_reports: dict[int, MetricsReport]) -> float:
    """Multi-task average AUC minus the single-task models' average AUC."""
    tasks = set(model_report.per_task)
    if set(single_task_reports) != tasks:
        raise ConfigError(
            f"task mismatch: model covers {sorted(tasks)}, "
            f"single-task references cover {sorted(single_task_reports)}"
        )
    single_aucs = []
    for task, rep in single_task_reports.items():
        if task not in rep.per_task or rep.per_task[task].auc is None:
            raise ConfigError(f"single-task reference for task {task} lacks an AUC")
        single_aucs.append(rep.per_task[task].auc)
    return float(model_report.average_auc - np.mean(single_aucs))


# ------------------------------------------------------------ bucket protocol

def equal_freq_buckets(scores, n_buckets: int = 10) -> np.ndarray:
    """Equal-frequency bucket index per sample, 0 (lowest scores) upward.

    Samples are ranked by score ascending with a stable tie-break on original
    index; bucket i takes ranks [i*n/n_buckets, (i+1)*n/n_buckets), so bucket
    sizes differ by at most 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if n_buckets < 2:
        raise ConfigError(f"n_buckets must be >= 2, got {n_buckets}")
    n = scores.shape[0]
    if n < n_buckets:
        raise ConfigError(f"need at least {n_buckets} samples, got {n}")
    if not np.all(np.isfinite(scores)):
        raise DataError("equal_freq_buckets: non-finite score")
    order = np.argsort(scores, kind="stable")
    edges = (np.arange(n_buckets + 1) * n) // n_buckets
    buckets = np.empty(n, dtype=np.int64)
    for b in range(n_buckets):
        buckets[order[edges[b] : edges[b + 1]]] = b
    return buckets


@dataclass
class BucketSplit:
    """Per-sample bucket indices for both tasks, their difference, and the
    subset each sample lands in (partitioned by thresholds lo < hi)."""

    bucket_a: np.ndarray
    bucket_b: np.ndarray
    delta: np.ndarray
    subset: np.ndarray  # values from SUBSET_NAMES
    lo: int
    hi: int

    def counts(self) -> dict[str, int]:
        return {name: int((self.subset == name).sum()) for name in SUBSET_NAMES}

    def indices(self, name: str) -> np.ndarray:
        if name not in SUBSET_NAMES:
            raise ConfigError(f"unknown subset {name!r}")
        return np.flatnonzero(self.subset == name)


def subset_split(
    scores_a, scores_b, lo: int = -4, hi: int = 6, n_buckets: int = 10
) -> BucketSplit:
    """Split samples by the bucket-index gap delta = b(score_a) - b(score_b):
    delta <= lo -> B-overwhelming, lo < delta <= hi -> comparable,
    delta > hi -> A-overwhelming."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    if scores_a.shape != scores_b.shape:
        raise ShapeError(f"subset_split: {scores_a.shape} vs {scores_b.shape}")
    if not lo < hi:
        raise ConfigError(f"need lo < hi, got lo={lo}, hi={hi}")
    b_a = equal_freq_buckets(scores_a, n_buckets)
    b_b = equal_freq_buckets(scores_b, n_buckets)
    delta = b_a - b_b
    subset = np.where(
        delta <= lo,
        SUBSET_NAMES[0],
        np.where(delta <= hi, SUBSET_NAMES[1], SUBSET_NAMES[2]),
    )
    return BucketSplit(b_a, b_b, delta, subset, lo, hi)


def evaluate_subsets(
    model, test: Dataset, split: BucketSplit, focus_task: int
) -> dict[str, float | None]:
    """Focus-task AUC computed independently inside each subset; subsets
    lacking both classes report None."""
    scores = model.predict(test)[focus_task]
    return subset_aucs(scores, test.labels[:, focus_task], split)


def subset_aucs(scores, labels, split: BucketSplit) -> dict[str, float | None]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape[0] != split.subset.shape[0]:
        raise ShapeError(
            f"{scores.shape[0]} scores vs split over {split.subset.shape[0]} samples"
        )
    out: dict[str, float | None] = {}
    for name in SUBSET_NAMES:
        idx = split.indices(name)
        if idx.size == 0:
            out[name] = None
            continue
        try:
            out[name] = auc(scores[idx], labels[idx])
        except UndefinedMetricError:
            out[name] = None
    return out


# ------------------------------------------------------------------- writers

def write_metrics_csv(rows: list[tuple[str, str, str, float | None]], path: str | Path) -> None:
    """Machine-readable metric lines: task,metric,subset,value."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task,metric,subset,value\n")
        for task, metric, subset, value in rows:
            v = "" if value is None else f"{value:.6f}"
            fh.write(f"{task},{metric},{subset},{v}\n")


def format_metrics_table(rows: list[tuple[str, str, str, float | None]]) -> str:
    """Fixed-width table of the same rows for standard output."""
    header = ("task", "metric", "subset", "value")
    str_rows = [
        (task, metric, subset, "absent" if value is None else f"{value:.6f}")
        for task, metric, subset, value in rows
    ]
    widths = [
        max(len(header[c]), *(len(r[c]) for r in str_rows)) if str_rows else len(header[c])
        for c in range(4)
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in str_rows]
    return "\n".join(lines)


def write_predictions_csv(
    scores: dict[int, np.ndarray], labels: np.ndarray, path: str | Path
) -> None:
    """Prediction dump for external recomputation: sample_idx,task,score,label."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_idx,task,score,label\n")
        for task in sorted(scores):
            s = scores[task]
            for i in range(s.shape[0]):
                fh.write(f"{i},{task},{s[i]:.10g},{labels[i, task]}\n")


def write_bucket_split_csv(split: BucketSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_idx,bucket_a,bucket_b,delta,subset\n")
        for i in range(split.delta.shape[0]):
            fh.write(
                f"{i},{split.bucket_a[i]},{split.bucket_b[i]},{split.delta[i]},{split.subset[i]}\n"
            )
