"""Tiling and non-maximum suppression for slide-level detections."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .types import Detection, SlideGeometry

DEFAULT_IOU = 0.5


def _offsets(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    offsets = [0]
    while offsets[-1] + tile < extent:
        offsets.append(min(offsets[-1] + stride, extent - tile))
    return offsets


def tile_plan(geometry: SlideGeometry, tile_size_px: int, overlap_fraction: float = 0.1):
    """Inference tiles as ``(x, y, width, height)`` tuples in row-major order.

    Tiles sit on a grid with stride ``floor(tile * (1 - overlap))``; the last
    row and column are shifted back so they end at the slide border.
    """
    if int(tile_size_px) != tile_size_px or tile_size_px < 1:
        raise ValueError(f"tile_size_px must be an integer >= 1, got {tile_size_px!r}")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap_fraction must lie in [0, 1), got {overlap_fraction!r}")
    tile = int(tile_size_px)
    stride = max(1, int(math.floor(tile * (1.0 - overlap_fraction))))
    tw = min(tile, geometry.width_px)
    th = min(tile, geometry.height_px)
    return [
        (x, y, tw, th)
        for y in _offsets(geometry.height_px, tile, stride)
        for x in _offsets(geometry.width_px, tile, stride)
    ]


def to_slide_coords(tile_origin: tuple[float, float], detections: Sequence[Detection]) -> list[Detection]:
    """Shift tile-local detections by the tile origin."""
    ox, oy = tile_origin
    return [Detection(d.cx + ox, d.cy + oy, d.half_side, d.confidence) for d in detections]


def box_iou(a: Detection, b: Detection) -> float:
    ax0, ay0, ax1, ay1 = a.box
    bx0, by0, bx1, by1 = b.box
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def priority_order(detections: Sequence[Detection]) -> np.ndarray:
    """Indices by (confidence desc, cy, cx, input index)."""
    n = len(detections)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    conf = np.array([d.confidence for d in detections])
    cy = np.array([d.cy for d in detections])
    cx = np.array([d.cx for d in detections])
    return np.lexsort((np.arange(n), cx, cy, -conf))


def non_max_suppression(detections: Sequence[Detection], iou_threshold: float = DEFAULT_IOU) -> list[Detection]:
    """Greedy NMS.

    Repeatedly keeps the top-priority remaining detection and drops every
    remaining detection whose IoU with it exceeds ``iou_threshold``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold!r}")
    order = priority_order(detections)
    if order.size == 0:
        return []
    boxes = np.array([detections[i].box for i in order], dtype=np.float64)
    x0, y0, x1, y1 = boxes.T
    areas = (x1 - x0) * (y1 - y0)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(detections[order[i]])
        rest = np.arange(i + 1, len(order))
        rest = rest[alive[rest]]
        if rest.size == 0:
            break
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        iou = inter / (areas[i] + areas[rest] - inter)
        alive[rest[iou > iou_threshold]] = False
    return kept
