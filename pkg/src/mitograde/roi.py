"""Mitotic-count hotspot search.

The ROI is the fixed-size, axis-aligned window holding the most detection
centres. A point (x, y) lies in the window with top-left (L, T) iff
``L <= x < L + w`` and ``T <= y < T + h``.

Any optimal window can be slid right (down) until its left (top) edge sits
on a contained point without losing anything, so the candidate lefts are the
point x-coordinates and the candidate tops the point y-coordinates (clamped to
the slide when bounds are given). ``max_count_window`` sweeps the candidate
tops in increasing order and keeps, over the candidate lefts, a segment tree
of window counts with range-add / leftmost range-argmax. Ties resolve to the
smallest (top, left), matching the brute-force reference exactly.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numba
import numpy as np

from .types import DEFAULT_AREA_MM2, DEFAULT_ASPECT, RoiWindow, SlideRecord, window_dims_px

def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.empty((0, 2), dtype=np.float64)
    pts = pts.reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def _check_dims(w: float, h: float) -> None:
    if not (w > 0 and h > 0 and math.isfinite(w) and math.isfinite(h)):
        raise ValueError(f"window dimensions must be finite and positive, got {w!r} x {h!r}")


def _candidates(coord: np.ndarray, max_start: Optional[float]) -> np.ndarray:
    if max_start is None:
        return coord
    # a slide narrower than the window admits only position 0
    return np.minimum(coord, max(max_start, 0.0))


def max_count_window_bruteforce(
    points,
    w: float,
    h: float,
    max_left: Optional[float] = None,
    max_top: Optional[float] = None,
) -> RoiWindow:
    """Reference search over all O(n^2) candidate (left, top) pairs.

    Intended as a test oracle for small inputs.
    """
    _check_dims(w, h)
    pts = _as_points(points)
    if len(pts) == 0:
        return RoiWindow(0.0, 0.0, w, h, 0)
    x, y = pts[:, 0], pts[:, 1]
    lefts = np.unique(_candidates(x, max_left))
    tops = np.unique(_candidates(y, max_top))
    best = (-1, 0.0, 0.0)
    for top in tops:
        bx = np.sort(x[(top <= y) & (y < top + h)])
        if bx.size <= best[0]:
            continue
        # per left: #(x < left + w) - #(x < left) == #(left <= x < left + w)
        counts = np.searchsorted(bx, lefts + w, "left") - np.searchsorted(bx, lefts, "left")
        j = int(np.argmax(counts))
        if counts[j] > best[0]:
            best = (int(counts[j]), float(lefts[j]), float(top))
    count, left, top = best
    return RoiWindow(left, top, w, h, count)


def _index_ranges(coord: np.ndarray, max_start: Optional[float], extent: float):
    """Candidate starts plus, per point, the half-open index range of starts covering it.

    Start ``s`` covers ``c`` iff ``s <= c < s + extent``. Also returns the
    permutation sorting ``coord``, along which both range ends are monotone.
    """
    order = np.argsort(coord, kind="stable")
    sorted_cand = _candidates(coord[order], max_start)
    fresh = np.empty(len(order), dtype=bool)
    fresh[0] = True
    np.not_equal(sorted_cand[1:], sorted_cand[:-1], out=fresh[1:])
    starts = sorted_cand[fresh]
    hi = np.empty(len(order), dtype=np.int64)
    lo = np.empty(len(order), dtype=np.int64)
    hi[order] = np.cumsum(fresh)
    lo[order] = np.searchsorted(starts + extent, coord[order], side="right")
    return starts, lo, hi, order


@numba.njit(cache=True, nogil=True)
def _sweep(x_lo, x_hi, y_lo, y_hi, y_order, n_x, n_y):
    """Max-overlap sweep over candidate indices.

    Point i covers candidate lefts [x_lo[i], x_hi[i]) and candidate tops
    [y_lo[i], y_hi[i]); both y ends are non-decreasing along ``y_order``.
    Returns (count, left_index, top_index).
    """
    size = 1
    while size < n_x:
        size *= 2
    # tree[p]: max over the node's leaves including adds stored at p and below
    tree = np.zeros(2 * size, dtype=np.int32)
    pending = np.zeros(2 * size, dtype=np.int32)
    for i in range(n_x, size):
        tree[size + i] = -(1 << 30)
    for p in range(size - 1, 0, -1):
        tree[p] = max(tree[2 * p], tree[2 * p + 1])

    n = x_lo.shape[0]
    add_order = y_order
    rem_order = y_order
    ai = 0
    ri = 0
    best = -1
    best_left = 0
    best_top = 0
    for t in range(n_y):
        changed = False
        while ri < n and y_hi[rem_order[ri]] <= t:
            k = rem_order[ri]
            if y_lo[k] < y_hi[k] and x_lo[k] < x_hi[k]:
                _range_add(tree, pending, size, x_lo[k], x_hi[k], -1)
            ri += 1
        while ai < n and y_lo[add_order[ai]] <= t:
            k = add_order[ai]
            if y_lo[k] < y_hi[k] and x_lo[k] < x_hi[k]:
                _range_add(tree, pending, size, x_lo[k], x_hi[k], 1)
                changed = True
            ai += 1
        # a strictly larger count can only appear after an insertion
        if changed and tree[1] > best:
            best = tree[1]
            best_top = t
            best_left = _leftmost_max(tree, pending, size)
    return best, best_left, best_top


@numba.njit(cache=True, nogil=True)
def _range_add(tree, pending, size, lo, hi, v):
    l = lo + size
    r = hi + size
    l0 = l
    r0 = r - 1
    while l < r:
        if l & 1:
            tree[l] += v
            pending[l] += v
            l += 1
        if r & 1:
            r -= 1
            tree[r] += v
            pending[r] += v
        l >>= 1
        r >>= 1
    # recompute ancestors of both boundary leaves, once per shared node
    while l0 > 1:
        l0 >>= 1
        r0 >>= 1
        tree[l0] = max(tree[2 * l0], tree[2 * l0 + 1]) + pending[l0]
        if r0 != l0:
            tree[r0] = max(tree[2 * r0], tree[2 * r0 + 1]) + pending[r0]


@numba.njit(cache=True, nogil=True)
def _leftmost_max(tree, pending, size):
    p = 1
    need = tree[1]
    while p < size:
        need -= pending[p]
        if tree[2 * p] == need:
            p = 2 * p
        else:
            p = 2 * p + 1
    return p - size


def max_count_window(
    points,
    w: float,
    h: float,
    max_left: Optional[float] = None,
    max_top: Optional[float] = None,
) -> RoiWindow:
    """Exact maximum-count window in O(n log n).

    ``max_left`` / ``max_top`` clamp the window position (slide bounds); leave
    them ``None`` for an unbounded plane.
    """
    _check_dims(w, h)
    pts = _as_points(points)
    if len(pts) == 0:
        return RoiWindow(0.0, 0.0, w, h, 0)
    x, y = pts[:, 0], pts[:, 1]
    # same predicates as the brute force: left <= x and x < left + w
    lefts, x_lo, x_hi, _ = _index_ranges(x, max_left, w)
    tops, y_lo, y_hi, y_order = _index_ranges(y, max_top, h)
    count, li, ti = _sweep(x_lo, x_hi, y_lo, y_hi, y_order, len(lefts), len(tops))
    if count <= 0:
        # every point falls outside the admissible positions
        return RoiWindow(float(lefts[0]), float(tops[0]), w, h, 0)
    return RoiWindow(float(lefts[li]), float(tops[ti]), w, h, int(count))


def max_count_window_strided(
    points,
    w: float,
    h: float,
    stride: float,
    max_left: Optional[float] = None,
    max_top: Optional[float] = None,
) -> RoiWindow:
    """Best window among positions on a regular grid with the given stride.

    A lower bound on the exact maximum. Without bounds, the grid spans the
    point bounding box.
    """
    _check_dims(w, h)
    if not (stride > 0 and math.isfinite(stride)):
        raise ValueError(f"stride must be > 0, got {stride!r}")
    pts = _as_points(points)
    if len(pts) == 0:
        return RoiWindow(0.0, 0.0, w, h, 0)
    x, y = pts[:, 0], pts[:, 1]

    def grid(coord, bound):
        lo = 0.0 if bound is not None else math.floor(coord.min() / stride) * stride
        hi = max(bound, 0.0) if bound is not None else coord.max()
        g = lo + stride * np.arange(int(math.floor((hi - lo) / stride)) + 1)
        if bound is not None and g[-1] < hi:
            g = np.append(g, hi)
        return g

    lefts = grid(x, max_left)
    tops = grid(y, max_top)
    order = np.argsort(y, kind="stable")
    ys, xs = y[order], x[order]
    best = (-1, 0.0, 0.0)
    for top in tops:
        band = np.sort(xs[np.searchsorted(ys, top, "left"):np.searchsorted(ys, top + h, "left")])
        if band.size <= best[0]:
            continue
        counts = np.searchsorted(band, lefts + w, "left") - np.searchsorted(band, lefts, "left")
        j = int(np.argmax(counts))
        if counts[j] > best[0]:
            best = (int(counts[j]), float(lefts[j]), float(top))
    count, left, top = best
    return RoiWindow(left, top, w, h, count)


def slide_window_bounds(slide: SlideRecord, w: float, h: float) -> tuple[float, float]:
    geom = slide.geometry
    return max(geom.width_px - w, 0.0), max(geom.height_px - h, 0.0)


def mc_for_slide(
    slide: SlideRecord,
    area_mm2: float = DEFAULT_AREA_MM2,
    aspect: float = DEFAULT_ASPECT,
    mode: str = "exact",
    stride: Optional[float] = None,
    min_confidence: float = 0.0,
) -> tuple[int, RoiWindow]:
    """Mitotic count and ROI of one slide.

    Detections below ``min_confidence`` are ignored. ``mode`` is ``"exact"``
    (sweep line) or ``"strided"`` (grid search with ``stride`` pixels,
    defaulting to a tenth of the window height).
    """
    w, h = window_dims_px(slide.geometry, area_mm2, aspect)
    pts = np.array(
        [(d.cx, d.cy) for d in slide.detections if d.confidence >= min_confidence],
        dtype=np.float64,
    ).reshape(-1, 2)
    max_left, max_top = slide_window_bounds(slide, w, h)
    if mode == "exact":
        roi = max_count_window(pts, w, h, max_left, max_top)
    elif mode == "strided":
        roi = max_count_window_strided(pts, w, h, stride or h / 10.0, max_left, max_top)
    else:
        raise ValueError(f"unknown ROI mode {mode!r}")
    return roi.mitotic_count, roi


def mc_for_slides(
    slides: Sequence[SlideRecord],
    workers: int = 1,
    **kwargs,
) -> list[tuple[int, RoiWindow]]:
    """``mc_for_slide`` over many slides; output order follows input order."""
    if workers <= 1 or len(slides) <= 1:
        return [mc_for_slide(s, **kwargs) for s in slides]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: mc_for_slide(s, **kwargs), slides))
