"""Evaluation metrics for continuous malignancy scores against WHO grades."""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

GRADES = (1, 2, 3)
SUMMARY_METRICS = ("spearman", "pearson", "mse", "correct")


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is requested for a constant vector."""


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    if x.size < 2:
        raise ValueError("correlation needs at least two pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    # boundaries of runs of equal values in sorted order
    edges = np.flatnonzero(np.diff(sv)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [v.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    if p.size < 1:
        raise ValueError("mse needs at least one pair")
    return float(np.mean((p - t) ** 2))


def round_grade(score: float) -> int:
    """Nearest integer with halves away from zero, clamped to 1..3."""
    r = math.floor(abs(score) + 0.5)
    r = int(math.copysign(r, score))
    return min(3, max(1, r))


def rounded_accuracy(pred_scores, grades) -> tuple[int, int, list[int]]:
    rounded = [round_grade(float(s)) for s in pred_scores]
    grades = [int(g) for g in grades]
    if len(rounded) != len(grades):
        raise ValueError("length mismatch")
    correct = sum(r == g for r, g in zip(rounded, grades))
    return correct, len(grades), rounded


@dataclass
class CaseResult:
    case_id: str
    predicted_score: float
    who_grade: int
    rounded_grade: int


@dataclass
class EvalReport:
    per_case: list[CaseResult]
    spearman: float
    pearson: float
    mse: float
    correct: int
    total: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        cases = [CaseResult(**c) for c in data["per_case"]]
        return cls(cases, data["spearman"], data["pearson"], data["mse"], data["correct"], data["total"])


def evaluate(case_ids: Sequence[str], scores, grades) -> EvalReport:
    scores = [float(s) for s in scores]
    grades = [int(g) for g in grades]
    if any(g not in GRADES for g in grades):
        raise ValueError("grades must be 1, 2 or 3")
    correct, total, rounded = rounded_accuracy(scores, grades)
    cases = [CaseResult(str(c), s, g, r) for c, s, g, r in zip(case_ids, scores, grades, rounded)]
    return EvalReport(
        per_case=cases,
        spearman=spearman(scores, grades),
        pearson=pearson(scores, grades),
        mse=mse(scores, grades),
        correct=correct,
        total=total,
    )


def multi_run_summary(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation (n - 1) of each metric across runs."""
    if len(reports) < 2:
        raise ValueError("need at least two reports for a spread estimate")
    summary = {}
    for name in SUMMARY_METRICS:
        vals = [float(getattr(r, name)) for r in reports]
        summary[name] = (statistics.fmean(vals), statistics.stdev(vals))
    return summary
