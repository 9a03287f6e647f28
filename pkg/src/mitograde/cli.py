"""Command-line pipeline: synth -> nms -> threshold -> roi -> fit -> predict -> evaluate.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Exit status: 0 on success, 1 on validation errors, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .grading import (
    GradingError,
    LogisticParams,
    GradingModel,
    TrainConfig,
    TrainingDivergedError,
    fit_patients,
    predict_patient,
    select_slide_per_patient,
)
from .ingest import (
    CorpusError,
    Corpus,
    read_detections,
    read_features,
    read_labels,
    read_slides,
    read_truths,
    save_corpus,
    write_detections,
    write_truths,
)
from .metrics import evaluate as evaluate_scores
from .metrics import multi_run_summary
from .nms import DEFAULT_IOU, non_max_suppression
from .roi import mc_for_slides
from .synth import CUTOFFS, add_false_positives, gen_grading_corpus, truths_for
from .threshold import DEFAULT_RADIUS, ThresholdError, optimize_threshold
from .types import DEFAULT_AREA_MM2, SlideGeometry, SlideRecord, parse_aspect

log = logging.getLogger("mitograde")

WORKERS_ENV = "MITOGRADE_WORKERS"
ROI_COLUMNS = ("slide_id", "mc", "left", "top", "width", "height")
PREDICTION_COLUMNS = ("patient_id", "slide_id", "mc", "score")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _num(v) -> str:
    return repr(float(v))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _rel(path: Path, base: Path) -> str:
    return os.path.relpath(Path(path).resolve(), base.resolve()).replace(os.sep, "/")


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs, outputs) -> Path:
    """Record flags, input/output hashes and library versions.

    Paths are stored relative to ``out`` so that identical runs in different
    directories produce identical manifests.
    """
    import numba
    import scipy

    flags = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command"):
            continue
        if isinstance(v, Path):
            v = _rel(v, out)
        elif isinstance(v, list) and v and isinstance(v[0], Path):
            v = [_rel(p, out) for p in v]
        flags[k] = v
    manifest = {
        "command": command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": [{"path": _rel(p, out), "sha256": _sha256(p)} for p in inputs],
        "outputs": [{"path": _rel(p, out), "sha256": _sha256(p)} for p in sorted(outputs)],
        "versions": {
            "mitograde": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _writer(path: Path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{flag}: no such file {path}")
    return Path(path)


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    env = os.environ.get(WORKERS_ENV)
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# table readers for stage outputs


def read_roi(path) -> dict[str, tuple[int, float, float, float, float]]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ROI_COLUMNS:
            raise CorpusError(f"{path}: expected columns {','.join(ROI_COLUMNS)}")
        for row in reader:
            if not row:
                continue
            try:
                out[row[0]] = (int(row[1]), *map(float, row[2:]))
            except (ValueError, IndexError):
                raise CorpusError(f"{path}:{reader.line_num}: malformed row") from None
    return out


def read_predictions(path) -> list[tuple[str, str, float, float]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_COLUMNS:
            raise CorpusError(f"{path}: expected columns {','.join(PREDICTION_COLUMNS)}")
        for row in reader:
            if not row:
                continue
            try:
                rows.append((row[0], row[1], float(row[2]), float(row[3])))
            except (ValueError, IndexError):
                raise CorpusError(f"{path}:{reader.line_num}: malformed row") from None
    return rows


def _slide_records(slides_path, features_path=None, detections=None) -> list[SlideRecord]:
    feats = read_features(features_path) if features_path else {}
    records = []
    for sid, pid, geom in read_slides(slides_path):
        dets = tuple((detections or {}).get(sid, ()))
        try:
            records.append(SlideRecord(sid, pid, geom, dets, tuple(feats[sid]) if sid in feats else None))
        except ValueError as exc:
            raise CorpusError(str(exc)) from None
    return records


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    if args.rule == "logistic":
        planted = LogisticParams(*args.planted)
    else:
        planted = tuple(args.cutoffs)
    corpus = gen_grading_corpus(
        args.seed,
        args.patients,
        planted,
        args.noise_sd,
        max_slides=args.max_slides,
        geometry=SlideGeometry(args.width, args.height, args.mpp),
        feature_dim=args.feature_dim,
        patches_per_slide=args.patches,
        background_rate=args.background_rate,
        patient_prefix=args.patient_prefix,
        total_slides=args.total_slides,
    )
    truths = [t for s in corpus.slides for t in truths_for(s)]
    if args.fp_fraction > 0:
        slides = [add_false_positives(s, args.seed, i, args.fp_fraction) for i, s in enumerate(corpus.slides)]
        corpus = Corpus(slides, corpus.labels)
    paths = save_corpus(corpus, out)
    truth_path = out / "truths.csv"
    write_truths(truth_path, truths)
    outputs = list(paths.values()) + [truth_path]
    write_manifest(out, "synth", args, [], outputs)
    log.info("wrote %d slides for %d patients to %s", len(corpus.slides), len(corpus.labels), out)
    return 0


def cmd_nms(args) -> int:
    out = _out_dir(args)
    src = _require(args.detections, "--detections")
    dets = read_detections(src)
    kept = [(sid, non_max_suppression(dets[sid], args.iou)) for sid in sorted(dets)]
    path = out / "detections.csv"
    write_detections(path, kept)
    write_manifest(out, "nms", args, [src], [path])
    return 0


def cmd_threshold(args) -> int:
    out = _out_dir(args)
    det_path = _require(args.detections, "--detections")
    truth_path = _require(args.truths, "--truths")
    dets = read_detections(det_path)
    truths = read_truths(truth_path)
    best, f1, curve = optimize_threshold(dets, truths, args.radius)
    curve_path = out / "pr_curve.csv"
    fh, w = _writer(curve_path)
    with fh:
        w.writerow(("threshold", "precision", "recall", "f1"))
        for c in curve:
            w.writerow([_num(c.threshold), _num(c.precision), _num(c.recall), _num(c.f1)])
    result_path = out / "threshold.json"
    result_path.write_text(
        json.dumps({"threshold": best, "f1": f1, "radius_px": args.radius}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    write_manifest(out, "threshold", args, [det_path, truth_path], [curve_path, result_path])
    print(f"threshold={best!r} f1={f1!r}")
    return 0


def cmd_roi(args) -> int:
    out = _out_dir(args)
    slides_path = _require(args.slides, "--slides")
    det_path = _require(args.detections, "--detections")
    inputs = [slides_path, det_path]
    min_conf = args.min_confidence
    if args.threshold_file is not None:
        tpath = _require(args.threshold_file, "--threshold-file")
        min_conf = float(json.loads(tpath.read_text(encoding="utf-8"))["threshold"])
        inputs.append(tpath)
    slides = _slide_records(slides_path, detections=read_detections(det_path))
    known = {s.slide_id for s in slides}
    results = mc_for_slides(
        slides,
        workers=_workers(args),
        area_mm2=args.area_mm2,
        aspect=parse_aspect(args.aspect),
        mode=args.mode,
        stride=args.stride,
        min_confidence=min_conf,
    )
    path = out / "roi.csv"
    fh, w = _writer(path)
    with fh:
        w.writerow(ROI_COLUMNS)
        for s, (mc, roi) in zip(slides, results):
            w.writerow([s.slide_id, mc, _num(roi.left), _num(roi.top), _num(roi.width_px), _num(roi.height_px)])
    write_manifest(out, "roi", args, inputs, [path])
    log.info("computed ROIs for %d slides", len(known))
    return 0


def _patient_groups(slides: Sequence[SlideRecord], labels: Optional[dict] = None):
    by_patient: dict[str, list[SlideRecord]] = {}
    for s in slides:
        by_patient.setdefault(s.patient_id, []).append(s)
    for pid in sorted(by_patient):
        group = sorted(by_patient[pid], key=lambda s: s.slide_id)
        if labels is None:
            yield pid, group, None
        else:
            if pid not in labels:
                raise CorpusError(f"patient {pid!r} has no grade label")
            yield pid, group, labels[pid]


def _mc_table(roi_path, slides) -> dict[str, int]:
    roi = read_roi(roi_path)
    missing = [s.slide_id for s in slides if s.slide_id not in roi]
    if missing:
        raise CorpusError(f"{roi_path}: no ROI for slides {missing[:5]}")
    return {sid: row[0] for sid, row in roi.items()}


def cmd_fit(args) -> int:
    out = _out_dir(args)
    slides_path = _require(args.slides, "--slides")
    labels_path = _require(args.labels, "--labels")
    roi_path = _require(args.roi, "--roi")
    inputs = [slides_path, labels_path, roi_path]
    features_path = None
    if args.features is not None:
        features_path = _require(args.features, "--features")
        inputs.append(features_path)
    slides = _slide_records(slides_path, features_path)
    labels = {lab.patient_id: lab for lab in read_labels(labels_path)}
    mcs = _mc_table(roi_path, slides)
    selected = select_slide_per_patient(_patient_groups(slides, labels), mcs)
    outputs = []
    for run in range(args.runs):
        config = TrainConfig(
            learning_rate=args.lr,
            max_epochs=args.max_epochs,
            patience=args.patience,
            val_fraction=args.val_fraction,
            seed=args.seed + run,
            optimizer=args.optimizer,
        )
        result = fit_patients(args.model, selected, config)
        model_path = out / f"model_run{run}.json"
        result.model.save(model_path)
        curve_path = out / f"curves_run{run}.csv"
        fh, w = _writer(curve_path)
        with fh:
            w.writerow(("epoch", "train_loss", "val_loss"))
            for e, (tl, vl) in enumerate(zip(result.train_curve, result.val_curve), start=1):
                w.writerow([e, _num(tl), _num(vl)])
        outputs += [model_path, curve_path]
        log.info("run %d: best epoch %d, val loss %.6g", run, result.best_epoch, min(result.val_curve))
    write_manifest(out, "fit", args, inputs, outputs)
    return 0


def _model_paths(spec: Sequence[Path]) -> list[Path]:
    paths: list[Path] = []
    for p in spec:
        p = Path(p)
        if p.is_dir():
            found = sorted(p.glob("model_run*.json"), key=lambda q: int(q.stem.rsplit("run", 1)[1]))
            if not found:
                raise FileNotFoundError(f"no model_run*.json in {p}")
            paths += found
        else:
            paths.append(_require(p, "--models"))
    return paths


def cmd_predict(args) -> int:
    out = _out_dir(args)
    slides_path = _require(args.slides, "--slides")
    roi_path = _require(args.roi, "--roi")
    inputs = [slides_path, roi_path]
    features_path = None
    if args.features is not None:
        features_path = _require(args.features, "--features")
        inputs.append(features_path)
    model_paths = _model_paths(args.models)
    inputs += model_paths
    slides = _slide_records(slides_path, features_path)
    mcs = _mc_table(roi_path, slides)
    groups = list(_patient_groups(slides))
    outputs = []
    for run, mpath in enumerate(model_paths):
        model = GradingModel.load(mpath)

        def score(group):
            pid, group_slides, _ = group
            top = min(group_slides, key=lambda s: (-mcs[s.slide_id], s.slide_id))
            return pid, top.slide_id, mcs[top.slide_id], predict_patient(model, group_slides, mcs)

        workers = _workers(args)
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(score, groups))
        else:
            rows = [score(g) for g in groups]
        path = out / f"predictions_run{run}.csv"
        fh, w = _writer(path)
        with fh:
            w.writerow(PREDICTION_COLUMNS)
            for pid, sid, mc, s in rows:
                w.writerow([pid, sid, mc, _num(s)])
        outputs.append(path)
    write_manifest(out, "predict", args, inputs, outputs)
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    labels_path = _require(args.labels, "--labels")
    pred_paths = [_require(p, "--predictions") for p in args.predictions]
    labels = {lab.patient_id: lab.who_grade for lab in read_labels(labels_path)}
    reports = []
    per_case_rows = []
    plot_rows = []
    for run, path in enumerate(pred_paths):
        rows = read_predictions(path)
        missing = [r[0] for r in rows if r[0] not in labels]
        if missing:
            raise CorpusError(f"{path}: no grade label for patients {missing[:5]}")
        report = evaluate_scores([r[0] for r in rows], [r[3] for r in rows], [labels[r[0]] for r in rows])
        reports.append(report)
        for c in report.per_case:
            per_case_rows.append([run, c.case_id, _num(c.predicted_score), c.who_grade, c.rounded_grade])
        plot_rows += [[run, r[2], _num(r[3])] for r in rows]
    doc = {"runs": [r.to_dict() for r in reports]}
    if len(reports) >= 2:
        doc["summary"] = {k: {"mean": m, "sd": sd} for k, (m, sd) in multi_run_summary(reports).items()}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    case_path = out / "per_case.csv"
    fh, w = _writer(case_path)
    with fh:
        w.writerow(("run", "case_id", "predicted_score", "who_grade", "rounded_grade"))
        w.writerows(per_case_rows)
    outputs = [report_path, case_path]
    if args.plot_data:
        plot_path = out / "plot_data.csv"
        fh, w = _writer(plot_path)
        with fh:
            w.writerow(("run", "mc", "predicted_score"))
            w.writerows(plot_rows)
        outputs.append(plot_path)
    write_manifest(out, "evaluate", args, [labels_path] + pred_paths, outputs)
    for i, r in enumerate(reports):
        print(f"run {i}: spearman={r.spearman:.4f} pearson={r.pearson:.4f} mse={r.mse:.4f} correct={r.correct}/{r.total}")
    if "summary" in doc:
        for k, v in doc["summary"].items():
            print(f"{k}: mean={v['mean']:.4f} sd={v['sd']:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mitograde", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--patients", type=int, default=341)
    s.add_argument("--max-slides", type=int, default=3)
    s.add_argument("--total-slides", type=int, default=None)
    s.add_argument("--rule", choices=("cutoff", "logistic"), default="cutoff")
    s.add_argument("--cutoffs", type=float, nargs=2, default=list(CUTOFFS), metavar=("LOW", "HIGH"))
    s.add_argument("--planted", type=float, nargs=4, default=[0.3, -3.0, 2.0, 1.0], metavar=("W1", "B1", "W2", "B2"))
    s.add_argument("--noise-sd", type=float, default=0.0)
    s.add_argument("--feature-dim", type=int, default=512)
    s.add_argument("--patches", type=int, default=4)
    s.add_argument("--background-rate", type=float, default=0.0, help="detections per mm^2")
    s.add_argument("--fp-fraction", type=float, default=0.0, help="share of low-confidence false positives")
    s.add_argument("--width", type=int, default=10000)
    s.add_argument("--height", type=int, default=8000)
    s.add_argument("--mpp", type=float, default=0.5, help="microns per pixel")
    s.add_argument("--patient-prefix", default="P")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("nms", help="non-maximum suppression per slide")
    s.add_argument("--detections", type=Path, required=True)
    s.add_argument("--iou", type=float, default=DEFAULT_IOU)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_nms)

    s = sub.add_parser("threshold", help="F1-optimal detection threshold")
    s.add_argument("--detections", type=Path, required=True)
    s.add_argument("--truths", type=Path, required=True)
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_threshold)

    s = sub.add_parser("roi", help="mitotic count and hotspot window per slide")
    s.add_argument("--slides", type=Path, required=True)
    s.add_argument("--detections", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--area-mm2", type=float, default=DEFAULT_AREA_MM2)
    s.add_argument("--aspect", default="4:3")
    s.add_argument("--mode", choices=("exact", "strided"), default="exact")
    s.add_argument("--stride", type=float, default=None, help="grid stride in px for --mode strided")
    s.add_argument("--min-confidence", type=float, default=0.0)
    s.add_argument("--threshold-file", type=Path, default=None, help="threshold.json from the threshold step")
    s.add_argument("--workers", type=int, default=None, help=f"default: ${WORKERS_ENV} or 1")
    s.set_defaults(func=cmd_roi)

    s = sub.add_parser("fit", help="train grading models")
    s.add_argument("--slides", type=Path, required=True)
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--roi", type=Path, required=True)
    s.add_argument("--features", type=Path, default=None)
    s.add_argument("--model", choices=("mc", "image", "combined"), default="mc")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--max-epochs", type=int, default=TrainConfig.max_epochs)
    s.add_argument("--patience", type=int, default=TrainConfig.patience)
    s.add_argument("--val-fraction", type=float, default=TrainConfig.val_fraction)
    s.add_argument("--optimizer", choices=("adam", "gd"), default=TrainConfig.optimizer)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="score patients with fitted models")
    s.add_argument("--models", type=Path, nargs="+", required=True, help="model files or fit output directories")
    s.add_argument("--slides", type=Path, required=True)
    s.add_argument("--roi", type=Path, required=True)
    s.add_argument("--features", type=Path, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="correlations, MSE and rounded accuracy")
    s.add_argument("--predictions", type=Path, nargs="+", required=True)
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--plot-data", action="store_true", help="also write (mc, score) pairs")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors exit 1 through _Parser.error; --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"mitograde {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, CorpusError, GradingError, ThresholdError, TrainingDivergedError, ValueError) as exc:
        print(f"mitograde {args.command}: validation error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mitograde {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
