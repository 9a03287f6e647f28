"""Mitotic-count based meningioma grading: detection postprocessing, hotspot search,
grading regressors and evaluation metrics."""

__version__ = "0.1.0"

from .types import (  # noqa: E402
    Detection,
    GradeLabel,
    PatchFeature,
    RoiWindow,
    SlideGeometry,
    SlideRecord,
    window_dims_px,
)

__all__ = [
    "__version__",
    "Detection",
    "GradeLabel",
    "PatchFeature",
    "RoiWindow",
    "SlideGeometry",
    "SlideRecord",
    "window_dims_px",
]
