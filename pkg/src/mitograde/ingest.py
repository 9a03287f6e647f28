"""Corpus files: parsing, validation and serialization.

Four CSV tables, UTF-8 with LF line endings:

* slides:      ``slide_id,patient_id,width_px,height_px,microns_per_px``
* detections:  ``slide_id,cx,cy,half_side,confidence``
* labels:      ``patient_id,who_grade``
* features:    ``slide_id,patch_x,patch_y,f0,...,f{D-1}`` (optional)

Reals are written with ``repr`` (shortest round-trip form). Unknown columns
are rejected.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .types import Detection, GradeLabel, PatchFeature, SlideGeometry, SlideRecord

SLIDE_COLUMNS = ("slide_id", "patient_id", "width_px", "height_px", "microns_per_px")
DETECTION_COLUMNS = ("slide_id", "cx", "cy", "half_side", "confidence")
LABEL_COLUMNS = ("patient_id", "who_grade")
TRUTH_COLUMNS = ("slide_id", "cx", "cy", "is_mitotic")
FEATURE_PREFIX = ("slide_id", "patch_x", "patch_y")

SLIDES_FILE = "slides.csv"
DETECTIONS_FILE = "detections.csv"
LABELS_FILE = "labels.csv"
FEATURES_FILE = "features.csv"
TRUTHS_FILE = "truths.csv"


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class IntegrityError(CorpusError):
    pass


@dataclass(frozen=True)
class Corpus:
    slides: tuple[SlideRecord, ...]
    labels: tuple[GradeLabel, ...]
    patients: dict = field(init=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "slides", tuple(self.slides))
        object.__setattr__(self, "labels", tuple(self.labels))
        seen = set()
        for s in self.slides:
            if s.slide_id in seen:
                raise IntegrityError(f"duplicate slide_id {s.slide_id!r}")
            seen.add(s.slide_id)
        graded = {}
        for lab in self.labels:
            if lab.patient_id in graded:
                raise IntegrityError(f"patient {lab.patient_id!r} has more than one grade label")
            graded[lab.patient_id] = lab
        patients = defaultdict(list)
        for s in self.slides:
            if s.patient_id not in graded:
                raise IntegrityError(f"patient {s.patient_id!r} (slide {s.slide_id!r}) has no grade label")
            patients[s.patient_id].append(s.slide_id)
        dims = {p.dim for s in self.slides for p in (s.patch_features or ())}
        if len(dims) > 1:
            raise IntegrityError(f"patch features have mixed dimensions {sorted(dims)}")
        object.__setattr__(self, "patients", dict(patients))

    def slide(self, slide_id: str) -> SlideRecord:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    def label_of(self, patient_id: str) -> GradeLabel:
        for lab in self.labels:
            if lab.patient_id == patient_id:
                return lab
        raise KeyError(patient_id)


def _rows(path, expected: Optional[Sequence[str]] = None, prefix: Optional[Sequence[str]] = None):
    """Yield (line_number, row dict) after validating the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "missing header") from None
        if expected is not None and tuple(header) != tuple(expected):
            raise ParseError(path, 1, f"expected columns {','.join(expected)}, got {','.join(header)}")
        if prefix is not None and tuple(header[: len(prefix)]) != tuple(prefix):
            raise ParseError(path, 1, f"header must start with {','.join(prefix)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            yield line, header, row


def _parse(path, line, fn, value, name):
    try:
        return fn(value)
    except (TypeError, ValueError) as exc:
        raise ParseError(path, line, f"bad {name} {value!r}: {exc}") from None


def _int(value: str) -> int:
    f = float(value)
    if not f.is_integer():
        raise ValueError("not an integer")
    return int(f)


def read_slides(path) -> list[tuple[str, str, SlideGeometry]]:
    out = []
    for line, _, row in _rows(path, SLIDE_COLUMNS):
        sid, pid, w, h, mpp = row
        if not sid or not pid:
            raise ParseError(path, line, "empty slide_id or patient_id")
        try:
            geom = SlideGeometry(_int(w), _int(h), float(mpp))
        except ValueError as exc:
            raise ParseError(path, line, str(exc)) from None
        out.append((sid, pid, geom))
    return out


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = defaultdict(list)
    for line, _, row in _rows(path, DETECTION_COLUMNS):
        sid = row[0]
        cx, cy, hs, conf = (_parse(path, line, float, v, n) for v, n in zip(row[1:], DETECTION_COLUMNS[1:]))
        try:
            out[sid].append(Detection(cx, cy, hs, conf))
        except ValueError as exc:
            raise ParseError(path, line, str(exc)) from None
    return dict(out)


def read_labels(path) -> list[GradeLabel]:
    out = []
    for line, _, row in _rows(path, LABEL_COLUMNS):
        grade = _parse(path, line, _int, row[1], "who_grade")
        try:
            out.append(GradeLabel(row[0], grade))
        except ValueError as exc:
            raise ParseError(path, line, str(exc)) from None
    return out


def read_features(path) -> dict[str, list[PatchFeature]]:
    out: dict[str, list[PatchFeature]] = defaultdict(list)
    for line, header, row in _rows(path, prefix=FEATURE_PREFIX):
        names = header[3:]
        if not names or names != [f"f{i}" for i in range(len(names))]:
            raise ParseError(path, 1, "feature columns must be f0..f{D-1}")
        values = [_parse(path, line, float, v, "feature value") for v in row[3:]]
        px = _parse(path, line, float, row[1], "patch_x")
        py = _parse(path, line, float, row[2], "patch_y")
        try:
            out[row[0]].append(PatchFeature((px, py), np.array(values)))
        except ValueError as exc:
            raise ParseError(path, line, str(exc)) from None
    return dict(out)


def read_truths(path):
    from .threshold import GroundTruthAnnotation

    out = []
    for line, _, row in _rows(path, TRUTH_COLUMNS):
        cx = _parse(path, line, float, row[1], "cx")
        cy = _parse(path, line, float, row[2], "cy")
        flag = row[3].strip().lower()
        if flag not in ("0", "1", "true", "false"):
            raise ParseError(path, line, f"bad is_mitotic {row[3]!r}")
        out.append(GroundTruthAnnotation(row[0], cx, cy, flag in ("1", "true")))
    return out


def load_corpus(detections_path, labels_path, slides_path, features_path=None) -> Corpus:
    """Read and cross-validate the corpus tables."""
    slide_rows = read_slides(slides_path)
    detections = read_detections(detections_path)
    labels = read_labels(labels_path)
    features = read_features(features_path) if features_path else {}
    known = {sid for sid, _, _ in slide_rows}
    for table, name in ((detections, detections_path), (features, features_path)):
        unknown = sorted(set(table) - known)
        if unknown:
            raise IntegrityError(f"{name}: unknown slide_id(s) {unknown[:5]}")
    slides = []
    for sid, pid, geom in slide_rows:
        try:
            slides.append(SlideRecord(sid, pid, geom, tuple(detections.get(sid, ())), _features_or_none(features, sid)))
        except ValueError as exc:
            raise IntegrityError(str(exc)) from None
    return Corpus(slides, labels)


def _features_or_none(features, sid):
    return tuple(features[sid]) if sid in features else None


def load_corpus_dir(directory, with_features: bool = True) -> Corpus:
    d = Path(directory)
    feats = d / FEATURES_FILE
    return load_corpus(
        d / DETECTIONS_FILE, d / LABELS_FILE, d / SLIDES_FILE, feats if with_features and feats.exists() else None
    )


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _num(v) -> str:
    return repr(float(v))


def write_slides(path, slides: Iterable[SlideRecord]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(SLIDE_COLUMNS)
        for s in slides:
            g = s.geometry
            w.writerow([s.slide_id, s.patient_id, g.width_px, g.height_px, _num(g.microns_per_px)])


def write_detections(path, detections_by_slide) -> None:
    """``detections_by_slide``: iterable of (slide_id, detections)."""
    fh, w = _writer(path)
    with fh:
        w.writerow(DETECTION_COLUMNS)
        for sid, dets in detections_by_slide:
            for d in dets:
                w.writerow([sid, _num(d.cx), _num(d.cy), _num(d.half_side), _num(d.confidence)])


def write_labels(path, labels: Iterable[GradeLabel]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(LABEL_COLUMNS)
        for lab in labels:
            w.writerow([lab.patient_id, lab.who_grade])


def write_features(path, slides: Iterable[SlideRecord]) -> None:
    slides = [s for s in slides if s.patch_features]
    dim = slides[0].patch_features[0].dim if slides else 0
    fh, w = _writer(path)
    with fh:
        w.writerow(list(FEATURE_PREFIX) + [f"f{i}" for i in range(dim)])
        for s in slides:
            for p in s.patch_features:
                w.writerow([s.slide_id, _num(p.patch_origin[0]), _num(p.patch_origin[1])] + [_num(v) for v in p.values])


def write_truths(path, truths) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(TRUTH_COLUMNS)
        for t in truths:
            w.writerow([t.slide_id, _num(t.cx), _num(t.cy), int(bool(t.is_mitotic))])


def save_corpus(corpus: Corpus, directory) -> dict[str, Path]:
    """Write the corpus tables into ``directory``; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "slides": d / SLIDES_FILE,
        "detections": d / DETECTIONS_FILE,
        "labels": d / LABELS_FILE,
    }
    write_slides(paths["slides"], corpus.slides)
    write_detections(paths["detections"], ((s.slide_id, s.detections) for s in corpus.slides))
    write_labels(paths["labels"], corpus.labels)
    if any(s.patch_features for s in corpus.slides):
        paths["features"] = d / FEATURES_FILE
        write_features(paths["features"], corpus.slides)
    return paths


def group_by_patient(corpus: Corpus) -> list[tuple[str, list[SlideRecord], GradeLabel]]:
    """Slides grouped per patient, sorted by patient_id then slide_id."""
    labels = {lab.patient_id: lab for lab in corpus.labels}
    groups: dict[str, list[SlideRecord]] = defaultdict(list)
    for s in corpus.slides:
        groups[s.patient_id].append(s)
    return [
        (pid, sorted(groups[pid], key=lambda s: s.slide_id), labels[pid])
        for pid in sorted(groups)
    ]
