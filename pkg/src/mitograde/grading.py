"""Grading regressors mapping ROI information to a continuous malignancy score.

Three model kinds share one training loop:

``mc_only``
    score = sigmoid(w1 * mc + b1) * w2 + b2
``image_only``
    score = mean over ROI patches of (weights . standardized_feature + bias)
``combined``
    score = merge_w_mc * mc_only(mc) + merge_w_img * image_only(patches) + merge_b

Per-patch scores are linear in the features, so averaging patch scores equals
scoring the averaged feature; training uses the latter.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .types import GradeLabel, PatchFeature, SlideRecord

MODEL_KINDS = ("mc_only", "image_only", "combined")
KIND_ALIASES = {"mc": "mc_only", "image": "image_only", "combined": "combined"}
DEFAULT_LR = {"mc_only": 0.01, "image_only": 1e-3, "combined": 1e-3}


class GradingError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}: loss is not finite")
        self.epoch = epoch


def sigmoid(z):
    """Logistic function, evaluated on the branch that cannot overflow."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class LogisticParams:
    w1: float = 0.1
    b1: float = -1.0
    w2: float = 2.0
    b2: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.w1, self.b1, self.w2, self.b2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "LogisticParams":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True, eq=False)
class FeatureHeadParams:
    weights: np.ndarray
    bias: float = 2.0
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        object.__setattr__(self, "weights", w)
        for name in ("feature_mean", "feature_std"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64).ravel()
                if v.size != w.size:
                    raise GradingError(f"{name} has dimension {v.size}, weights have {w.size}")
                object.__setattr__(self, name, v)

    @property
    def dim(self) -> int:
        return int(self.weights.size)

    def standardize(self, values: np.ndarray) -> np.ndarray:
        out = np.asarray(values, dtype=np.float64)
        if self.feature_mean is not None:
            out = out - self.feature_mean
        if self.feature_std is not None:
            out = out / self.feature_std
        return out

    def __eq__(self, other):
        if not isinstance(other, FeatureHeadParams):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return (
            np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
            and same(self.feature_mean, other.feature_mean)
            and same(self.feature_std, other.feature_std)
        )


@dataclass(frozen=True)
class CombinedParams:
    logistic: LogisticParams
    feature_head: FeatureHeadParams
    merge_w_mc: float = 1.0
    merge_w_img: float = 1.0
    merge_b: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: Optional[float] = None
    max_epochs: int = 30000
    patience: int = 1000
    val_fraction: float = 0.15
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise GradingError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise GradingError("max_epochs and patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise GradingError("val_fraction must lie in (0, 1)")
        if self.optimizer not in ("adam", "gd"):
            raise GradingError(f"unknown optimizer {self.optimizer!r}")

    def lr_for(self, kind: str) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[kind]


# ---------------------------------------------------------------------------
# forward passes


def logistic_forward(params: LogisticParams, mc):
    return sigmoid(params.w1 * np.asarray(mc, dtype=np.float64) + params.b1) * params.w2 + params.b2


def logistic_gradient(params: LogisticParams, mc: float, target: float) -> np.ndarray:
    """Gradient of (t - target)^2 with respect to (w1, b1, w2, b2)."""
    s = sigmoid(params.w1 * mc + params.b1)
    r = 2.0 * (s * params.w2 + params.b2 - target)
    ds = r * params.w2 * s * (1.0 - s)
    return np.array([ds * mc, ds, r * s, r])


def _patch_matrix(patch_features) -> np.ndarray:
    if isinstance(patch_features, np.ndarray):
        mat = np.atleast_2d(np.asarray(patch_features, dtype=np.float64))
    else:
        patch_features = list(patch_features or ())
        if not patch_features:
            mat = np.empty((0, 0))
        else:
            mat = np.stack([p.values if isinstance(p, PatchFeature) else np.asarray(p, float) for p in patch_features])
    if mat.shape[0] == 0:
        raise GradingError("at least one patch feature is required")
    return mat


def feature_forward(params: FeatureHeadParams, patch_features) -> float:
    """Mean over patches of the per-patch linear score."""
    mat = _patch_matrix(patch_features)
    if mat.shape[1] != params.dim:
        raise GradingError(f"feature dimension {mat.shape[1]} does not match head dimension {params.dim}")
    scores = params.standardize(mat) @ params.weights + params.bias
    return float(np.mean(scores))


class CombinedOutput(NamedTuple):
    score: float
    mc_path_contrib: float
    img_path_contrib: float


def combined_forward(params: CombinedParams, mc: float, patch_features) -> CombinedOutput:
    mc_part = params.merge_w_mc * float(logistic_forward(params.logistic, mc))
    img_part = params.merge_w_img * feature_forward(params.feature_head, patch_features)
    return CombinedOutput(mc_part + img_part + params.merge_b, mc_part, img_part)


# ---------------------------------------------------------------------------
# flat parameter vectors and batch loss


def pack(kind: str, params) -> np.ndarray:
    if kind == "mc_only":
        return params.as_array()
    if kind == "image_only":
        return np.append(params.weights, params.bias)
    return np.concatenate(
        [
            params.logistic.as_array(),
            params.feature_head.weights,
            [params.feature_head.bias, params.merge_w_mc, params.merge_w_img, params.merge_b],
        ]
    )


def unpack(kind: str, theta: np.ndarray, template=None):
    """Inverse of ``pack``; standardization statistics come from ``template``."""
    theta = np.asarray(theta, dtype=np.float64)
    if kind == "mc_only":
        return LogisticParams.from_array(theta)
    mean = getattr(_head_of(template), "feature_mean", None)
    std = getattr(_head_of(template), "feature_std", None)
    if kind == "image_only":
        return FeatureHeadParams(theta[:-1].copy(), float(theta[-1]), mean, std)
    head = FeatureHeadParams(theta[4:-4].copy(), float(theta[-4]), mean, std)
    return CombinedParams(LogisticParams.from_array(theta[:4]), head, *(float(v) for v in theta[-3:]))


def _head_of(params):
    if isinstance(params, CombinedParams):
        return params.feature_head
    return params


def batch_loss_and_grad(kind: str, theta: np.ndarray, mc: np.ndarray, feats: Optional[np.ndarray], targets: np.ndarray):
    """Mean squared error over a batch and its gradient with respect to ``theta``.

    ``feats`` holds one already standardized mean-feature row per case.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n = targets.shape[0]
    grad = np.zeros_like(theta)
    if kind == "mc_only":
        w1, b1, w2, b2 = theta
        s = sigmoid(w1 * mc + b1)
        resid = s * w2 + b2 - targets
        r = 2.0 * resid / n
        ds = r * w2 * s * (1.0 - s)
        grad[:] = (ds @ mc, ds.sum(), r @ s, r.sum())
        return float(np.mean(resid**2)), grad
    if kind == "image_only":
        w, b = theta[:-1], theta[-1]
        resid = feats @ w + b - targets
        r = 2.0 * resid / n
        grad[:-1] = feats.T @ r
        grad[-1] = r.sum()
        return float(np.mean(resid**2)), grad
    w1, b1, w2, b2 = theta[:4]
    w, b = theta[4:-4], theta[-4]
    m_mc, m_img, m_b = theta[-3:]
    s = sigmoid(w1 * mc + b1)
    logit_out = s * w2 + b2
    img_out = feats @ w + b
    resid = m_mc * logit_out + m_img * img_out + m_b - targets
    r = 2.0 * resid / n
    r_log = r * m_mc
    ds = r_log * w2 * s * (1.0 - s)
    grad[:4] = (ds @ mc, ds.sum(), r_log @ s, r_log.sum())
    r_img = r * m_img
    grad[4:-4] = feats.T @ r_img
    grad[-4] = r_img.sum()
    grad[-3:] = (r @ logit_out, r @ img_out, r.sum())
    return float(np.mean(resid**2)), grad


# ---------------------------------------------------------------------------
# models


@dataclass
class GradingModel:
    kind: str
    params: object
    seed: Optional[int] = None
    config: Optional[TrainConfig] = None

    def __post_init__(self):
        self.kind = KIND_ALIASES.get(self.kind, self.kind)
        if self.kind not in MODEL_KINDS:
            raise GradingError(f"unknown model kind {self.kind!r}")

    @property
    def uses_features(self) -> bool:
        return self.kind != "mc_only"

    def predict(self, mc: float, patch_features=None) -> float:
        if self.kind == "mc_only":
            return float(logistic_forward(self.params, mc))
        if self.kind == "image_only":
            return feature_forward(self.params, patch_features)
        return combined_forward(self.params, mc, patch_features).score

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        logistic = self.params if self.kind == "mc_only" else getattr(self.params, "logistic", None)
        head = _head_of(self.params) if self.uses_features else None
        if logistic is not None:
            out.update(asdict(logistic))
        if head is not None:
            out["feature_weights"] = head.weights.tolist()
            out["feature_bias"] = head.bias
            out["feature_mean"] = None if head.feature_mean is None else head.feature_mean.tolist()
            out["feature_std"] = None if head.feature_std is None else head.feature_std.tolist()
        if self.kind == "combined":
            out["merge_w_mc"] = self.params.merge_w_mc
            out["merge_w_img"] = self.params.merge_w_img
            out["merge_b"] = self.params.merge_b
        out["seed"] = self.seed
        out["config"] = None if self.config is None else asdict(self.config)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "GradingModel":
        kind = KIND_ALIASES.get(data["kind"], data["kind"])
        head = None
        if kind != "mc_only":
            head = FeatureHeadParams(
                np.asarray(data["feature_weights"], dtype=np.float64),
                float(data["feature_bias"]),
                None if data.get("feature_mean") is None else np.asarray(data["feature_mean"]),
                None if data.get("feature_std") is None else np.asarray(data["feature_std"]),
            )
        if kind == "image_only":
            params = head
        else:
            logistic = LogisticParams(*(float(data[k]) for k in ("w1", "b1", "w2", "b2")))
            if kind == "mc_only":
                params = logistic
            else:
                params = CombinedParams(
                    logistic, head, float(data["merge_w_mc"]), float(data["merge_w_img"]), float(data["merge_b"])
                )
        config = TrainConfig(**data["config"]) if data.get("config") else None
        return cls(kind, params, data.get("seed"), config)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GradingModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "GradingModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


class TrainingRow(NamedTuple):
    case_id: str
    mc: float
    features: Optional[np.ndarray]  # (patches, D) raw features of the ROI, or None
    target: float


@dataclass
class TrainResult:
    model: GradingModel
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0


def initial_params(kind: str, dim: int = 0, seed: int = 0, mean=None, std=None):
    logistic = LogisticParams()
    if kind == "mc_only":
        return logistic
    rng = np.random.default_rng(seed)
    head = FeatureHeadParams(rng.uniform(-0.01, 0.01, size=dim), 2.0, mean, std)
    if kind == "image_only":
        return head
    return CombinedParams(logistic, head, 1.0, 1.0, 0.0)


def _feature_stats(rows: Sequence[TrainingRow]) -> tuple[np.ndarray, np.ndarray]:
    allp = np.concatenate([np.atleast_2d(r.features) for r in rows], axis=0)
    mean = allp.mean(axis=0)
    std = allp.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def _design(rows: Sequence[TrainingRow], head: Optional[FeatureHeadParams]):
    mc = np.array([r.mc for r in rows], dtype=np.float64)
    y = np.array([r.target for r in rows], dtype=np.float64)
    feats = None
    if head is not None:
        feats = np.stack([head.standardize(_patch_matrix(r.features)).mean(axis=0) for r in rows])
    return mc, feats, y


def train(
    kind: str,
    train_rows: Sequence[TrainingRow],
    val_rows: Sequence[TrainingRow],
    config: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Full-batch fit on mean squared error with validation-based early stopping.

    Losses are recorded after every update. Training stops once validation
    loss has not improved for ``config.patience`` epochs (or at
    ``max_epochs``) and returns the parameters of the epoch with the lowest
    validation loss.
    """
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in MODEL_KINDS:
        raise GradingError(f"unknown model kind {kind!r}")
    if not train_rows or not val_rows:
        raise GradingError("training and validation sets must be non-empty")

    if kind == "mc_only":
        params0 = initial_params(kind)
        head = None
    else:
        if any(r.features is None for r in list(train_rows) + list(val_rows)):
            raise GradingError(f"model kind {kind!r} needs patch features for every case")
        mean, std = _feature_stats(train_rows)
        params0 = initial_params(kind, mean.size, config.seed, mean, std)
        head = _head_of(params0)
    mc_t, f_t, y_t = _design(train_rows, head)
    mc_v, f_v, y_v = _design(val_rows, head)

    theta = pack(kind, params0)
    lr = config.lr_for(kind)
    # overflow surfaces as a non-finite loss and is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        return _fit_loop(kind, theta, params0, lr, config, (mc_t, f_t, y_t), (mc_v, f_v, y_v))


def _fit_loop(kind, theta, params0, lr, config, train_data, val_data) -> TrainResult:
    mc_t, f_t, y_t = train_data
    mc_v, f_v, y_v = val_data
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    train_curve: list[float] = []
    val_curve: list[float] = []
    best_val = math.inf
    best_theta = theta.copy()
    best_epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        _, grad = batch_loss_and_grad(kind, theta, mc_t, f_t, y_t)
        if config.optimizer == "adam":
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1**epoch)
            v_hat = v / (1 - beta2**epoch)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            theta = theta - lr * grad
        train_loss, _ = batch_loss_and_grad(kind, theta, mc_t, f_t, y_t)
        val_loss, _ = batch_loss_and_grad(kind, theta, mc_v, f_v, y_v)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss) and np.all(np.isfinite(theta))):
            raise TrainingDivergedError(epoch)
        train_curve.append(train_loss)
        val_curve.append(val_loss)
        if val_loss < best_val:
            best_val, best_theta, best_epoch = val_loss, theta.copy(), epoch
        elif epoch - best_epoch >= config.patience:
            break

    model = GradingModel(kind, unpack(kind, best_theta, params0), config.seed, config)
    return TrainResult(model, train_curve, val_curve, best_epoch)


# ---------------------------------------------------------------------------
# patient-level selection


class SelectedSlide(NamedTuple):
    patient_id: str
    slide: SlideRecord
    mc: int
    grade: int


def _top_slide(slides: Sequence[SlideRecord], mc_by_slide: Mapping[str, int]) -> SlideRecord:
    if not slides:
        raise GradingError("patient has no slides")
    missing = [s.slide_id for s in slides if s.slide_id not in mc_by_slide]
    if missing:
        raise GradingError(f"no mitotic count for slides {missing}")
    # highest MC; ties to the smallest slide_id
    return min(slides, key=lambda s: (-mc_by_slide[s.slide_id], s.slide_id))


def select_slide_per_patient(groups, mc_by_slide: Mapping[str, int]) -> list[SelectedSlide]:
    """One row per patient: the slide with the highest mitotic count.

    ``groups`` yields ``(patient_id, slides, label)`` as produced by
    ``ingest.group_by_patient``.
    """
    out = []
    for patient_id, slides, label in groups:
        if not slides:
            raise GradingError(f"patient {patient_id!r} has no slides")
        top = _top_slide(slides, mc_by_slide)
        grade = label.who_grade if isinstance(label, GradeLabel) else int(label)
        out.append(SelectedSlide(patient_id, top, int(mc_by_slide[top.slide_id]), grade))
    return out


def split_patients(patient_ids: Sequence[str], val_fraction: float = 0.15, seed: int = 0):
    """Seeded shuffle; the first ceil((1 - val_fraction) * n) go to training."""
    ids = sorted(set(patient_ids))
    if len(ids) < 2:
        raise GradingError("need at least two patients to split")
    if not 0.0 < val_fraction < 1.0:
        raise GradingError("val_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ids))
    # rounding guards against 0.85 * 20 == 17.000000000000004
    n_train = math.ceil(round((1.0 - val_fraction) * len(ids), 9))
    n_train = min(max(n_train, 1), len(ids) - 1)
    shuffled = [ids[i] for i in perm]
    return shuffled[:n_train], shuffled[n_train:]


def roi_features(slide: SlideRecord) -> Optional[np.ndarray]:
    """Patch features stored with the slide, as a (patches, D) array.

    Patches are expected to have been extracted from the slide's ROI upstream.
    """
    if not slide.patch_features:
        return None
    return np.stack([p.values for p in slide.patch_features])


def training_rows(selected: Sequence[SelectedSlide]) -> list[TrainingRow]:
    return [TrainingRow(s.patient_id, float(s.mc), roi_features(s.slide), float(s.grade)) for s in selected]


def fit_patients(kind: str, selected: Sequence[SelectedSlide], config: TrainConfig = TrainConfig()) -> TrainResult:
    """Split patients with ``config.seed`` and train on the selected slides."""
    rows = {r.case_id: r for r in training_rows(selected)}
    train_ids, val_ids = split_patients(list(rows), config.val_fraction, config.seed)
    return train(kind, [rows[i] for i in train_ids], [rows[i] for i in val_ids], config)


def predict_patient(model: GradingModel, slides: Sequence[SlideRecord], mc_by_slide: Mapping[str, int]) -> float:
    """Score of the patient's highest-MC slide."""
    top = _top_slide(slides, mc_by_slide)
    feats = roi_features(top) if model.uses_features else None
    if model.uses_features and feats is None:
        raise GradingError(f"slide {top.slide_id!r} has no patch features")
    return model.predict(float(mc_by_slide[top.slide_id]), feats)
