"""Detection-threshold selection by F1 against ground-truth annotations.

Detections are matched to mitotic ground truth by centre distance: in
descending confidence order, each detection claims the nearest still
unmatched mitotic annotation within ``radius_px``. Because the matching is
greedy in confidence order, the matching of the detections kept by any
threshold is a prefix of the full matching, so a single pass yields the
counts for every candidate threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .nms import priority_order
from .types import Detection

DEFAULT_RADIUS = 25.0


class ThresholdError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthAnnotation:
    slide_id: str
    cx: float
    cy: float
    is_mitotic: bool = True


class MatchCounts(NamedTuple):
    true_positives: int
    false_positives: int
    false_negatives: int


class CurvePoint(NamedTuple):
    threshold: float
    precision: float
    recall: float
    f1: float


def f1_score(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(precision, recall, f1); zero wherever the ratio is undefined."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _match_flags(detections: Sequence[Detection], truths, radius_px: float):
    """Per detection (in priority order): its confidence and whether it matched."""
    order = priority_order(detections)
    conf = np.array([detections[i].confidence for i in order], dtype=np.float64)
    matched = np.zeros(len(order), dtype=bool)
    pts = np.array([(t.cx, t.cy) for t in truths if t.is_mitotic], dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0 or len(order) == 0:
        return conf, matched, len(pts)
    tree = cKDTree(pts)
    taken = np.zeros(len(pts), dtype=bool)
    for k, i in enumerate(order):
        d = detections[i]
        near = tree.query_ball_point((d.cx, d.cy), radius_px)
        if not near:
            continue
        near = np.asarray(near)
        near = near[~taken[near]]
        if near.size == 0:
            continue
        dist = np.hypot(pts[near, 0] - d.cx, pts[near, 1] - d.cy)
        # nearest, then lowest annotation index
        j = near[np.lexsort((near, dist))[0]]
        taken[j] = True
        matched[k] = True
    return conf, matched, len(pts)


def match_detections(
    detections: Sequence[Detection],
    truths: Sequence[GroundTruthAnnotation],
    radius_px: float = DEFAULT_RADIUS,
) -> MatchCounts:
    """Greedy one-to-one matching; returns (TP, FP, FN)."""
    if not radius_px > 0:
        raise ValueError(f"radius_px must be > 0, got {radius_px!r}")
    _, matched, n_true = _match_flags(detections, truths, radius_px)
    tp = int(matched.sum())
    return MatchCounts(tp, len(matched) - tp, n_true - tp)


DetectionInput = Union[Sequence[Detection], Mapping[str, Sequence[Detection]]]


def optimize_threshold(
    detections: DetectionInput,
    truths: Sequence[GroundTruthAnnotation],
    radius_px: float = DEFAULT_RADIUS,
) -> tuple[float, float, list[CurvePoint]]:
    """Confidence cutoff maximizing F1.

    ``detections`` is either one slide's detections or a mapping from slide
    id to detections; in the latter case truths are matched per slide via
    their ``slide_id``. Candidates are the distinct confidences; a detection
    is kept when its confidence is >= the threshold. F1 ties go to the lowest
    threshold. Returns ``(best_threshold, best_f1, curve)`` with the curve in
    ascending threshold order.
    """
    if not radius_px > 0:
        raise ValueError(f"radius_px must be > 0, got {radius_px!r}")
    if isinstance(detections, Mapping):
        by_slide: dict[str, list] = {sid: [] for sid in detections}
        for t in truths:
            by_slide.setdefault(t.slide_id, []).append(t)
        parts = [_match_flags(detections.get(sid, ()), ts, radius_px) for sid, ts in by_slide.items()]
    else:
        parts = [_match_flags(detections, truths, radius_px)]
    conf = np.concatenate([p[0] for p in parts]) if parts else np.empty(0)
    matched = np.concatenate([p[1] for p in parts]) if parts else np.empty(0, dtype=bool)
    n_true = sum(p[2] for p in parts)
    if conf.size == 0:
        if n_true == 0:
            raise ThresholdError("F1 is undefined without detections and ground truth")
        raise ThresholdError("no detections to threshold")

    order = np.argsort(-conf, kind="stable")
    conf, matched = conf[order], matched[order]
    tp_cum = np.cumsum(matched)
    # last position of each distinct confidence closes a threshold group
    group_end = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    curve = []
    for end in group_end[::-1]:
        tp = int(tp_cum[end])
        fp = int(end + 1 - tp)
        p, r, f = f1_score(tp, fp, n_true - tp)
        curve.append(CurvePoint(float(conf[end]), p, r, f))
    best = max(curve, key=lambda c: (c.f1, -c.threshold))
    return best.threshold, best.f1, curve


def apply_threshold(detections: Sequence[Detection], threshold: float) -> list[Detection]:
    return [d for d in detections if d.confidence >= threshold]
