"""Top-K ranking metrics for multi-label evaluation.

P@K is the fraction of the K highest-scored classes that are truly active;
MAP@K averages P@i over the cutoffs i = 1..K of the same ranking. Ranking
ties are broken deterministically by ascending class id. Both metrics depend
on scores only through their ranks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelVector, ScoreVector

__all__ = ["top_k", "precision_at_k", "map_at_k", "EvalRow", "EvalResult", "compute_eval"]


def _as_scores(scores) -> np.ndarray:
    if isinstance(scores, ScoreVector):
        return scores.scores
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("scores must be one-dimensional")
    return s


def top_k(scores, k: int) -> np.ndarray:
    """Class ids of the k largest scores, descending; ties go to the lower id."""
    s = _as_scores(scores)
    if not (1 <= k <= s.size):
        raise ValueError(f"k must be in [1, {s.size}], got {k}")
    order = np.lexsort((np.arange(s.size), -s))
    return order[:k]


def precision_at_k(scores, label: LabelVector, k: int) -> float:
    ranked = top_k(scores, k)
    hits = sum(1 for c in ranked if c in label.active)
    return hits / k


def map_at_k(scores, label: LabelVector, k: int) -> float:
    ranked = top_k(scores, k)
    rel = np.array([1.0 if c in label.active else 0.0 for c in ranked])
    cutoffs = np.arange(1, k + 1, dtype=np.float64)
    return float(np.mean(np.cumsum(rel) / cutoffs))


@dataclass(frozen=True)
class EvalRow:
    k_label: str  # "2", "5", ... or "per-instance"
    precision: float
    mean_ap: float


@dataclass(frozen=True)
class EvalResult:
    """Mean P@K / MAP@K over a split, one row per requested K policy."""

    rows: tuple[EvalRow, ...]
    num_instances: int

    def __post_init__(self):
        for row in self.rows:
            if not (0.0 <= row.precision <= 1.0 and 0.0 <= row.mean_ap <= 1.0):
                raise ValueError("metric means must lie in [0, 1]")

    def row(self, k_label: str) -> EvalRow:
        for r in self.rows:
            if r.k_label == str(k_label):
                return r
        raise KeyError(f"no row for k={k_label}")

    def to_table(self) -> str:
        lines = ["k\tp_at_k\tmap_at_k\tinstances"]
        for r in self.rows:
            lines.append(f"{r.k_label}\t{r.precision:.10g}\t{r.mean_ap:.10g}\t{self.num_instances}")
        return "\n".join(lines) + "\n"


def compute_eval(
    scores: np.ndarray,
    labels: list[LabelVector],
    k_policy: str = "fixed",
    ks: tuple[int, ...] = (),
) -> EvalResult:
    """Aggregate per-instance metrics over a split.

    k_policy "fixed" reports one row per value in `ks`; "per-instance" uses
    each instance's own label cardinality as its K.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(labels) or not labels:
        raise ValueError("need a non-empty (instances x classes) score matrix matching labels")
    rows = []
    if k_policy == "fixed":
        if not ks:
            raise ValueError("fixed k policy needs at least one k")
        for k in ks:
            p = float(np.mean([precision_at_k(s, y, k) for s, y in zip(scores, labels)]))
            m = float(np.mean([map_at_k(s, y, k) for s, y in zip(scores, labels)]))
            rows.append(EvalRow(str(k), p, m))
    elif k_policy == "per-instance":
        p = float(np.mean([precision_at_k(s, y, y.cardinality) for s, y in zip(scores, labels)]))
        m = float(np.mean([map_at_k(s, y, y.cardinality) for s, y in zip(scores, labels)]))
        rows.append(EvalRow("per-instance", p, m))
    else:
        raise ValueError(f"unknown k policy {k_policy!r}")
    return EvalResult(rows=tuple(rows), num_instances=len(labels))
