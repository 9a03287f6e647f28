"""Seeded synthetic corpora with planted ground truth.

Every random draw for slide ``i`` comes from a generator seeded with
``SeedSequence([seed, i])`` (or ``[seed, i, tag]`` for auxiliary streams), so
a slide does not depend on how many other slides are generated or in what
order.

Hotspot slides carry an exclusion zone: background points are rejected
within ``window diagonal + hotspot radius`` of the hotspot centre, so no
window can hold hotspot and background points together. The background is
additionally redrawn until a coarse upper bound on its own best window count
stays below the planted count. Together this makes the slide's exact MC equal
to the planted ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .grading import LogisticParams, logistic_forward
from .ingest import Corpus
from .threshold import GroundTruthAnnotation
from .types import (
    DEFAULT_AREA_MM2,
    DEFAULT_ASPECT,
    DEFAULT_HALF_SIDE,
    Detection,
    GradeLabel,
    PatchFeature,
    SlideGeometry,
    SlideRecord,
    window_dims_px,
)

CUTOFFS = (4, 15)
# grade-conditional Poisson means of the default MC distribution, and weights
MC_MIXTURE = ((0.5, 1.0), (0.35, 9.0), (0.15, 24.0))
MC_CAP = 60
# stream tags appended to (seed, slide_index)
STREAM_LAYOUT = 1
STREAM_FALSE_POSITIVES = 2
STREAM_CORPUS = 3


def subseed_rng(seed: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


@dataclass(frozen=True)
class Hotspot:
    center: tuple[float, float]
    k: int
    radius_px: float


def _uniform_disc(rng, center, radius, k) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, k))
    theta = rng.uniform(0.0, 2.0 * math.pi, k)
    return np.column_stack((center[0] + r * np.cos(theta), center[1] + r * np.sin(theta)))


def _thin_to_bound(pts: np.ndarray, w: float, h: float, limit: int) -> np.ndarray:
    """Drop points, in order, that would push any 2x2 block of w x h cells above ``limit``.

    Every w x h window lies inside some 2x2 block of the cell grid, so the
    block totals bound every window count.
    """
    if len(pts) == 0:
        return pts
    cx = np.floor(pts[:, 0] / w).astype(np.int64)
    cy = np.floor(pts[:, 1] / h).astype(np.int64)
    # blocks[i, j] covers cells (i-1..i, j-1..j)
    blocks = np.zeros((cy.max() + 2, cx.max() + 2), dtype=np.int64)
    keep = np.zeros(len(pts), dtype=bool)
    for n, (i, j) in enumerate(zip(cy, cx)):
        b = blocks[i : i + 2, j : j + 2]
        if b.max() < limit:
            b += 1
            keep[n] = True
    return pts[keep]


def _confidences(rng, n, low=0.4, high=1.0) -> np.ndarray:
    return rng.uniform(low, high, n)


def gen_slide(
    seed: int,
    geometry: SlideGeometry,
    background_rate: float = 0.0,
    hotspot: Optional[Hotspot] = None,
    *,
    slide_id: str = "slide",
    patient_id: str = "patient",
    index: int = 0,
    area_mm2: float = DEFAULT_AREA_MM2,
    aspect: float = DEFAULT_ASPECT,
    tp_confidence: tuple[float, float] = (0.4, 1.0),
    half_side: float = DEFAULT_HALF_SIDE,
    background_limit: Optional[int] = None,
) -> SlideRecord:
    """One slide with uniform background detections and an optional planted hotspot.

    ``background_rate`` is in detections per mm^2 of slide. The background is
    thinned to at most ``background_limit`` detections per window (default: the
    hotspot count; unlimited without a hotspot).
    """
    if background_rate < 0:
        raise ValueError("background_rate must be >= 0")
    rng = subseed_rng(seed, index)
    w, h = window_dims_px(geometry, area_mm2, aspect)
    W, H = geometry.width_px, geometry.height_px
    hot = np.empty((0, 2))
    if hotspot is not None and hotspot.k > 0:
        cxh, cyh = hotspot.center
        r = hotspot.radius_px
        if not (0 < r and 2 * r < min(w, h)):
            raise ValueError(f"hotspot radius {r} does not fit a {w:.1f} x {h:.1f} px window")
        if not (cxh - r >= 0 and cyh - r >= 0 and cxh + r < W and cyh + r < H):
            raise ValueError("hotspot disc must lie inside the slide")
        hot = _uniform_disc(rng, hotspot.center, r, hotspot.k)

    area_mm2_slide = geometry.width_um * geometry.height_um / 1e6
    background = np.empty((0, 2))
    if background_rate > 0:
        limit = background_limit
        if limit is None and hotspot is not None and hotspot.k > 0:
            limit = hotspot.k
        n = rng.poisson(background_rate * area_mm2_slide)
        background = rng.uniform((0.0, 0.0), (W, H), size=(n, 2))
        if len(hot):
            keep = np.hypot(background[:, 0] - cxh, background[:, 1] - cyh) >= math.hypot(w, h) + r
            background = background[keep]
        if limit is not None:
            background = _thin_to_bound(background, w, h, limit)

    pts = np.vstack((hot, background))
    conf = _confidences(rng, len(pts), *tp_confidence)
    dets = tuple(Detection(float(x), float(y), half_side, float(c)) for (x, y), c in zip(pts, conf))
    return SlideRecord(slide_id, patient_id, geometry, dets)


def cutoff_grade(mc: float, cutoffs: tuple[float, float] = CUTOFFS) -> int:
    low, high = cutoffs
    if mc < low:
        return 1
    if mc > high:
        return 3
    return 2


def sample_mc(rng: np.random.Generator, n: int, mixture=MC_MIXTURE, cap: int = MC_CAP) -> np.ndarray:
    """Right-skewed mitotic counts: a Poisson mixture truncated at ``cap``."""
    weights = np.array([m[0] for m in mixture], dtype=np.float64)
    means = np.array([m[1] for m in mixture], dtype=np.float64)
    comp = rng.choice(len(mixture), size=n, p=weights / weights.sum())
    return np.minimum(rng.poisson(means[comp]), cap).astype(np.int64)


def gen_grading_corpus(
    seed: int,
    n_patients: int,
    planted: Union[LogisticParams, tuple[float, float]] = CUTOFFS,
    noise_sd: float = 0.0,
    *,
    max_slides: int = 3,
    geometry: SlideGeometry = SlideGeometry(10000, 8000, 0.5),
    feature_dim: int = 0,
    patches_per_slide: int = 4,
    feature_signal: float = 1.0,
    feature_direction: Optional[np.ndarray] = None,
    background_rate: float = 0.0,
    hotspot_radius_px: float = 600.0,
    patient_prefix: str = "P",
    total_slides: Optional[int] = None,
) -> Corpus:
    """Patients with planted maximal MCs and grades derived from them.

    Each patient gets 1..``max_slides`` slides; the first carries the
    patient's MC as a planted hotspot, the others strictly smaller hotspots
    and background thinned to at most the patient's MC. Patients with MC 0 get empty
    slides.
    Grades follow the cutoff rule ``(low, high)`` or the rounded output of a
    planted logistic model, with optional Gaussian noise of ``noise_sd``
    added to the grade before rounding. With ``feature_dim > 0`` each slide
    gets ``patches_per_slide`` feature vectors
    ``(grade - 2) * feature_signal * direction + N(0, 1)``.
    ``total_slides`` fixes the overall slide count instead of drawing the
    per-patient counts independently.
    """
    if n_patients < 10:
        raise ValueError("n_patients must be >= 10")
    if max_slides < 1:
        raise ValueError("max_slides must be >= 1")
    rng = subseed_rng(seed, 0, STREAM_CORPUS)
    mcs = sample_mc(rng, n_patients)
    if total_slides is None:
        n_slides = rng.integers(1, max_slides + 1, size=n_patients)
    else:
        if not n_patients <= total_slides <= n_patients * max_slides:
            raise ValueError(f"total_slides must lie in [{n_patients}, {n_patients * max_slides}]")
        extra = rng.choice(n_patients * (max_slides - 1), size=total_slides - n_patients, replace=False)
        n_slides = 1 + np.bincount(extra % n_patients, minlength=n_patients)
    if feature_dim > 0:
        if feature_direction is None:
            feature_direction = rng.standard_normal(feature_dim)
        direction = np.asarray(feature_direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)

    w, h = window_dims_px(geometry)
    margin = hotspot_radius_px + 1.0
    slides, labels = [], []
    index = 0
    width = len(str(n_patients - 1))
    for p in range(n_patients):
        pid = f"{patient_prefix}{p:0{width}d}"
        mc = int(mcs[p])
        if isinstance(planted, LogisticParams):
            score = float(logistic_forward(planted, mc))
        else:
            score = float(cutoff_grade(mc, planted))
        if noise_sd > 0:
            score += rng.normal(0.0, noise_sd)
        grade = min(3, max(1, int(math.floor(score + 0.5))))
        labels.append(GradeLabel(pid, grade))
        for j in range(int(n_slides[p])):
            srng = subseed_rng(seed, index, STREAM_LAYOUT)
            k = mc if j == 0 else int(srng.integers(0, mc)) if mc > 0 else 0
            center = (
                float(srng.uniform(margin, geometry.width_px - margin)),
                float(srng.uniform(margin, geometry.height_px - margin)),
            )
            slide = gen_slide(
                seed,
                geometry,
                background_rate if mc > 0 else 0.0,
                Hotspot(center, k, hotspot_radius_px) if k > 0 else None,
                slide_id=f"{pid}-S{j}",
                patient_id=pid,
                index=index,
                background_limit=mc,
            )
            if feature_dim > 0:
                feats = tuple(
                    PatchFeature(
                        (center[0] + srng.uniform(-w / 2, w / 2), center[1] + srng.uniform(-h / 2, h / 2)),
                        (grade - 2) * feature_signal * direction + srng.standard_normal(feature_dim),
                    )
                    for _ in range(patches_per_slide)
                )
                slide = SlideRecord(slide.slide_id, pid, geometry, slide.detections, feats)
            slides.append(slide)
            index += 1
    return Corpus(slides, labels)


def gen_detection_benchmark(
    seed: int,
    geometry: SlideGeometry,
    n_mitotic: int,
    fp_fraction: float = 0.2,
    separation: float = 0.4,
    *,
    slide_id: str = "slide",
    min_spacing_px: float = 100.0,
    half_side: float = DEFAULT_HALF_SIDE,
) -> tuple[list[Detection], list[GroundTruthAnnotation]]:
    """Detections and truths with a planted confidence separation.

    Every mitotic truth gets a detection exactly on it with confidence in
    ``[separation, 1)``; false positives (``fp_fraction`` of all detections)
    sit on non-mitotic lookalikes with confidence in ``[0, separation)``.
    Annotations lie on a jittered grid at least ``min_spacing_px`` apart.
    """
    if not 0.0 <= fp_fraction < 1.0:
        raise ValueError("fp_fraction must lie in [0, 1)")
    rng = subseed_rng(seed, 0)
    n_fp = int(round(n_mitotic * fp_fraction / (1.0 - fp_fraction)))
    total = n_mitotic + n_fp
    cols = int(geometry.width_px // min_spacing_px)
    rows = int(geometry.height_px // min_spacing_px)
    if cols * rows < total:
        raise ValueError("slide too small for the requested annotation count")
    cells = rng.choice(cols * rows, size=total, replace=False)
    jitter = rng.uniform(0.25, 0.75, size=(total, 2)) * min_spacing_px
    xy = np.column_stack((cells % cols, cells // cols)) * min_spacing_px + jitter
    truths = [
        GroundTruthAnnotation(slide_id, float(x), float(y), i < n_mitotic) for i, (x, y) in enumerate(xy)
    ]
    conf = np.concatenate(
        (rng.uniform(separation, 1.0, n_mitotic), rng.uniform(0.0, separation, n_fp))
    )
    dets = [Detection(float(x), float(y), half_side, float(c)) for (x, y), c in zip(xy, conf)]
    return dets, truths


def add_false_positives(slide: SlideRecord, seed: int, index: int, fraction: float, below: float = 0.4) -> SlideRecord:
    """Add uniformly placed low-confidence detections making up ``fraction`` of the total."""
    if fraction <= 0 or not slide.detections:
        return slide
    rng = subseed_rng(seed, index, STREAM_FALSE_POSITIVES)
    n_fp = int(round(len(slide.detections) * fraction / (1.0 - fraction)))
    g = slide.geometry
    pts = rng.uniform((0.0, 0.0), (g.width_px, g.height_px), size=(n_fp, 2))
    conf = rng.uniform(0.0, below, n_fp)
    extra = tuple(
        Detection(float(x), float(y), slide.detections[0].half_side, float(c)) for (x, y), c in zip(pts, conf)
    )
    return SlideRecord(slide.slide_id, slide.patient_id, g, slide.detections + extra, slide.patch_features)


def truths_for(slide: SlideRecord, min_confidence: float = 0.4) -> list[GroundTruthAnnotation]:
    """Mitotic annotations at the slide's planted (high-confidence) detections."""
    return [
        GroundTruthAnnotation(slide.slide_id, d.cx, d.cy, True) for d in slide.detections if d.confidence >= min_confidence
    ]
