"""Domain types shared across the pipeline.

All geometry is in slide pixel coordinates. Conversion to physical units
goes through ``SlideGeometry.microns_per_px``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_HALF_SIDE = 25.0
DEFAULT_AREA_MM2 = 2.5
DEFAULT_ASPECT = 4.0 / 3.0
DEFAULT_FEATURE_DIM = 512


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class SlideGeometry:
    width_px: int
    height_px: int
    microns_per_px: float

    def __post_init__(self):
        if int(self.width_px) != self.width_px or self.width_px < 1:
            raise ValueError(f"width_px must be an integer >= 1, got {self.width_px!r}")
        if int(self.height_px) != self.height_px or self.height_px < 1:
            raise ValueError(f"height_px must be an integer >= 1, got {self.height_px!r}")
        if not (math.isfinite(self.microns_per_px) and self.microns_per_px > 0):
            raise ValueError(f"microns_per_px must be finite and > 0, got {self.microns_per_px!r}")

    @property
    def width_um(self) -> float:
        return self.width_px * self.microns_per_px

    @property
    def height_um(self) -> float:
        return self.height_px * self.microns_per_px

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.width_px and 0.0 <= y < self.height_px


@dataclass(frozen=True)
class Detection:
    """A candidate mitotic figure: square box centred on (cx, cy)."""

    cx: float
    cy: float
    half_side: float = DEFAULT_HALF_SIDE
    confidence: float = 1.0

    def __post_init__(self):
        if not _finite(self.cx, self.cy, self.half_side, self.confidence):
            raise ValueError(f"non-finite detection field in {self!r}")
        if self.half_side <= 0:
            raise ValueError(f"half_side must be > 0, got {self.half_side!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence!r}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1)."""
        h = self.half_side
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)

    @property
    def area(self) -> float:
        return (2.0 * self.half_side) ** 2


@dataclass(frozen=True, eq=False)
class PatchFeature:
    patch_origin: tuple[float, float]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("patch feature values must be a non-empty vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("patch feature values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "patch_origin", (float(self.patch_origin[0]), float(self.patch_origin[1])))

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, PatchFeature):
            return NotImplemented
        return self.patch_origin == other.patch_origin and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patient_id: str
    geometry: SlideGeometry
    detections: tuple[Detection, ...] = ()
    patch_features: Optional[tuple[PatchFeature, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        if self.patch_features is not None:
            object.__setattr__(self, "patch_features", tuple(self.patch_features))
        for det in self.detections:
            if not self.geometry.contains(det.cx, det.cy):
                raise ValueError(
                    f"detection at ({det.cx}, {det.cy}) lies outside slide {self.slide_id!r} "
                    f"({self.geometry.width_px}x{self.geometry.height_px})"
                )

    def centers(self) -> np.ndarray:
        """Detection centres as an (n, 2) float array."""
        if not self.detections:
            return np.empty((0, 2), dtype=np.float64)
        return np.array([(d.cx, d.cy) for d in self.detections], dtype=np.float64)


@dataclass(frozen=True)
class GradeLabel:
    patient_id: str
    who_grade: int

    def __post_init__(self):
        if self.who_grade not in (1, 2, 3):
            raise ValueError(f"who_grade must be 1, 2 or 3, got {self.who_grade!r}")


@dataclass(frozen=True)
class RoiWindow:
    left: float
    top: float
    width_px: float
    height_px: float
    mitotic_count: int = 0

    def __post_init__(self):
        if not (self.width_px > 0 and self.height_px > 0):
            raise ValueError("window dimensions must be positive")
        if self.mitotic_count < 0:
            raise ValueError("mitotic_count must be >= 0")

    def contains(self, x: float, y: float) -> bool:
        # half-open so abutting windows never share a point
        return self.left <= x < self.left + self.width_px and self.top <= y < self.top + self.height_px

    def count(self, points: np.ndarray) -> int:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
        inside = (self.left <= x) & (x < self.left + self.width_px) & (self.top <= y) & (y < self.top + self.height_px)
        return int(inside.sum())


def window_dims_px(
    geometry: SlideGeometry,
    area_mm2: float = DEFAULT_AREA_MM2,
    aspect_w_over_h: float = DEFAULT_ASPECT,
) -> tuple[float, float]:
    """Pixel width and height of a window with the given physical area and aspect ratio.

    Dimensions stay fractional so that the area is exact.
    """
    if not (math.isfinite(area_mm2) and area_mm2 > 0):
        raise ValueError(f"area_mm2 must be > 0, got {area_mm2!r}")
    if not (math.isfinite(aspect_w_over_h) and aspect_w_over_h > 0):
        raise ValueError(f"aspect must be > 0, got {aspect_w_over_h!r}")
    area_um2 = area_mm2 * 1e6
    width_um = math.sqrt(area_um2 * aspect_w_over_h)
    height_um = math.sqrt(area_um2 / aspect_w_over_h)
    mpp = geometry.microns_per_px
    return width_um / mpp, height_um / mpp


def parse_aspect(text: str) -> float:
    """Parse ``"4:3"``, ``"4/3"`` or a plain number."""
    for sep in (":", "/"):
        if sep in text:
            num, den = text.split(sep, 1)
            return float(num) / float(den)
    return float(text)
