import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mitograde.grading import (
    CombinedParams,
    FeatureHeadParams,
    GradingError,
    GradingModel,
    LogisticParams,
    SelectedSlide,
    TrainConfig,
    TrainingDivergedError,
    TrainingRow,
    batch_loss_and_grad,
    combined_forward,
    feature_forward,
    fit_patients,
    initial_params,
    logistic_forward,
    logistic_gradient,
    pack,
    predict_patient,
    select_slide_per_patient,
    sigmoid,
    split_patients,
    train,
    unpack,
)
from mitograde.ingest import group_by_patient
from mitograde.roi import mc_for_slide
from mitograde.synth import gen_grading_corpus
from mitograde.types import GradeLabel, PatchFeature, SlideGeometry, SlideRecord

GEOM = SlideGeometry(100, 100, 1.0)


def central_difference(f, theta, step=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        g[i] = (f(theta + e) - f(theta - e)) / (2 * step)
    return g


def component_rel_error(a, b, floor=1e-3):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_logistic(rng):
    return LogisticParams(rng.uniform(-0.5, 0.5), rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-2, 3))


def random_head(rng, dim):
    return FeatureHeadParams(rng.normal(size=dim), rng.normal(), rng.normal(size=dim), rng.uniform(0.5, 2.0, dim))


class TestSigmoid:
    def test_values(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(800.0) == 1.0
        assert sigmoid(-800.0) == 0.0
        assert isinstance(sigmoid(1.0), float)

    def test_no_overflow_warnings(self):
        with np.errstate(over="raise", invalid="raise"):
            out = sigmoid(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
        assert np.all((out >= 0) & (out <= 1))


class TestForward:
    def test_logistic_examples(self):
        assert logistic_forward(LogisticParams(0, 0, 2, 1), 17.0) == 2.0
        assert logistic_forward(LogisticParams(1, 0, 1, 0), 0.0) == 0.5

    @given(
        w1=st.floats(-2, 2), b1=st.floats(-5, 5), w2=st.floats(-4, 4).filter(lambda v: abs(v) > 1e-3),
        b2=st.floats(-3, 3), mc=st.floats(0, 30),
    )
    def test_logistic_range(self, w1, b1, w2, b2, mc):
        t = float(logistic_forward(LogisticParams(w1, b1, w2, b2), mc))
        lo, hi = sorted((b2, b2 + w2))
        assert lo - 1e-12 <= t <= hi + 1e-12

    @given(w1=st.floats(0, 1), b1=st.floats(-5, 5), w2=st.floats(0, 4), mc=st.floats(0, 30), d=st.floats(0, 10))
    def test_monotone_when_w1w2_nonnegative(self, w1, b1, w2, mc, d):
        p = LogisticParams(w1, b1, w2, 1.0)
        assert logistic_forward(p, mc + d) >= logistic_forward(p, mc)

    def test_feature_head_constant(self):
        head = FeatureHeadParams(np.zeros(3), 1.5)
        assert feature_forward(head, [PatchFeature((0, 0), [1.0, 2.0, 3.0])] * 4) == 1.5

    def test_feature_head_single_patch(self):
        head = FeatureHeadParams(np.array([1.0, -2.0]), 0.5)
        assert feature_forward(head, [PatchFeature((0, 0), [3.0, 1.0])]) == 1.5

    def test_feature_head_empty_or_wrong_dim(self):
        head = FeatureHeadParams(np.ones(2), 0.0)
        with pytest.raises(GradingError):
            feature_forward(head, [])
        with pytest.raises(GradingError):
            feature_forward(head, [PatchFeature((0, 0), [1.0, 2.0, 3.0])])

    def test_mean_of_scores_equals_score_of_mean(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            dim = int(rng.integers(1, 40))
            head = random_head(rng, dim)
            patches = rng.normal(size=(int(rng.integers(1, 10)), dim))
            per_patch = np.mean([feature_forward(head, p[None, :]) for p in patches])
            of_mean = feature_forward(head, patches.mean(axis=0)[None, :])
            assert abs(per_patch - of_mean) < 1e-12
            assert abs(feature_forward(head, patches) - per_patch) < 1e-12

    def test_combined_special_cases(self):
        logistic = LogisticParams(0.2, -1.0, 2.0, 1.0)
        head = FeatureHeadParams(np.array([0.3, 0.1]), 0.7)
        patches = np.array([[1.0, 2.0], [0.0, -1.0]])
        out = combined_forward(CombinedParams(logistic, head, 1.5, 0.0, 0.25), 6.0, patches)
        assert out.img_path_contrib == 0.0
        assert out.score == 1.5 * float(logistic_forward(logistic, 6.0)) + 0.25
        out = combined_forward(CombinedParams(logistic, head, 0.0, 0.0, 0.25), 6.0, patches)
        assert out.score == 0.25

    def test_combined_decomposition(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            dim = int(rng.integers(1, 20))
            params = CombinedParams(random_logistic(rng), random_head(rng, dim), *rng.normal(size=3))
            out = combined_forward(params, rng.uniform(0, 40), rng.normal(size=(3, dim)))
            assert abs(out.mc_path_contrib + out.img_path_contrib + params.merge_b - out.score) < 1e-12

    def test_combined_per_patch_average(self):
        rng = np.random.default_rng(2)
        params = CombinedParams(random_logistic(rng), random_head(rng, 5), *rng.normal(size=3))
        patches = rng.normal(size=(6, 5))
        per_patch = np.mean([combined_forward(params, 9.0, p[None, :]).score for p in patches])
        assert abs(per_patch - combined_forward(params, 9.0, patches).score) < 1e-12


class TestGradients:
    def test_single_sample_logistic(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p, mc, target = random_logistic(rng), rng.uniform(0, 40), float(rng.integers(1, 4))

            def loss(theta):
                return (float(logistic_forward(LogisticParams.from_array(theta), mc)) - target) ** 2

            num = central_difference(loss, p.as_array())
            assert component_rel_error(logistic_gradient(p, mc, target), num) < 1e-5

    def test_zero_at_target(self):
        p = LogisticParams(0.3, -1.0, 2.0, 1.0)
        t = float(logistic_forward(p, 5.0))
        np.testing.assert_array_equal(logistic_gradient(p, 5.0, t), np.zeros(4))

    def test_zero_scale_blocks_inner_gradient(self):
        g = logistic_gradient(LogisticParams(0.3, -1.0, 0.0, 1.0), 5.0, 3.0)
        assert g[0] == 0.0 and g[1] == 0.0

    @pytest.mark.parametrize("kind", ["mc_only", "image_only", "combined"])
    def test_batch_gradient_through_forward(self, kind):
        """Analytic batch gradient vs finite differences of the per-patch forward passes."""
        rng = np.random.default_rng(hash(kind) % 2**32)
        for _ in range(30):
            n, dim = int(rng.integers(1, 12)), int(rng.integers(1, 6))
            mc = rng.uniform(0, 40, n)
            y = rng.integers(1, 4, n).astype(float)
            patches = [rng.normal(size=(int(rng.integers(1, 5)), dim)) for _ in range(n)]
            head = random_head(rng, dim)
            if kind == "mc_only":
                template = random_logistic(rng)
            elif kind == "image_only":
                template = head
            else:
                template = CombinedParams(random_logistic(rng), head, *rng.normal(size=3))
            model_of = lambda th: GradingModel(kind, unpack(kind, th, template))  # noqa: E731

            def loss(theta):
                m = model_of(theta)
                return float(np.mean([(m.predict(mc[i], patches[i]) - y[i]) ** 2 for i in range(n)]))

            theta = pack(kind, template)
            feats = np.stack([head.standardize(p).mean(axis=0) for p in patches])
            value, grad = batch_loss_and_grad(kind, theta, mc, feats, y)
            assert value == pytest.approx(loss(theta), rel=1e-12, abs=1e-14)
            assert component_rel_error(grad, central_difference(loss, theta)) < 1e-5


class TestPackAndPersist:
    def test_pack_roundtrip(self):
        rng = np.random.default_rng(4)
        combined = CombinedParams(random_logistic(rng), random_head(rng, 4), 0.5, 0.25, -1.0)
        for kind, params in (
            ("mc_only", combined.logistic),
            ("image_only", combined.feature_head),
            ("combined", combined),
        ):
            assert unpack(kind, pack(kind, params), params) == params

    def test_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        cfg = TrainConfig(learning_rate=0.02, seed=3)
        params = CombinedParams(random_logistic(rng), random_head(rng, 3), 0.5, 0.25, -1.0)
        model = GradingModel("combined", params, 3, cfg)
        model.save(tmp_path / "m.json")
        loaded = GradingModel.load(tmp_path / "m.json")
        assert loaded == model
        assert loaded.to_json() == model.to_json()

    def test_flat_json_keys(self):
        d = json.loads(GradingModel("mc", LogisticParams()).to_json())
        assert set(d) == {"kind", "w1", "b1", "w2", "b2", "seed", "config"}
        head = FeatureHeadParams(np.ones(2), 0.0)
        d = json.loads(GradingModel("image", head).to_json())
        assert "w1" not in d and d["feature_weights"] == [1.0, 1.0]

    def test_unknown_kind(self):
        with pytest.raises(GradingError):
            GradingModel("forest", LogisticParams())

    def test_initial_params(self):
        assert initial_params("mc_only") == LogisticParams(0.1, -1.0, 2.0, 1.0)
        p = initial_params("combined", 16, seed=1)
        assert np.all(np.abs(p.feature_head.weights) <= 0.01)
        assert p.feature_head.bias == 2.0
        assert (p.merge_w_mc, p.merge_w_img, p.merge_b) == (1.0, 1.0, 0.0)


class TestSelectionAndSplit:
    def slide(self, sid, pid="p"):
        return SlideRecord(sid, pid, GEOM)

    def test_tie_break_by_slide_id(self):
        slides = [self.slide("c"), self.slide("a"), self.slide("b")]
        rows = select_slide_per_patient([("p", slides, GradeLabel("p", 2))], {"a": 2, "b": 7, "c": 7})
        assert rows == [SelectedSlide("p", slides[2], 7, 2)]

    def test_single_slide_and_empty_patient(self):
        s = self.slide("x")
        assert select_slide_per_patient([("p", [s], 3)], {"x": 0})[0].slide is s
        with pytest.raises(GradingError):
            select_slide_per_patient([("p", [], 3)], {})

    def test_predict_patient_uses_max_mc(self):
        model = GradingModel("mc", LogisticParams(0.2, -2.0, 2.0, 1.0))
        slides = [self.slide("a"), self.slide("b")]
        assert predict_patient(model, slides, {"a": 0, "b": 20}) == model.predict(20)
        with pytest.raises(GradingError):
            predict_patient(model, [], {})

    def test_split_sizes(self):
        ids = [f"p{i}" for i in range(20)]
        tr, va = split_patients(ids, 0.15, 0)
        assert (len(tr), len(va)) == (17, 3)
        assert sorted(tr + va) == sorted(ids) and not set(tr) & set(va)
        assert split_patients(ids, 0.15, 0) == (tr, va)

    def test_split_needs_two(self):
        with pytest.raises(GradingError):
            split_patients(["a"], 0.15, 0)

    def test_split_differs_across_seeds(self):
        ids = [f"p{i:03d}" for i in range(100)]
        differ = sum(split_patients(ids, 0.15, 2 * k) != split_patients(ids, 0.15, 2 * k + 1) for k in range(100))
        assert differ >= 99


def rows_from(mcs, targets, features=None):
    return [
        TrainingRow(f"c{i}", float(m), None if features is None else features[i], float(t))
        for i, (m, t) in enumerate(zip(mcs, targets))
    ]


class TestTraining:
    def test_constant_targets(self):
        rng = np.random.default_rng(6)
        mcs = rng.integers(0, 40, 60)
        res = train("mc_only", rows_from(mcs[:50], [2.0] * 50), rows_from(mcs[50:], [2.0] * 10))
        preds = logistic_forward(res.model.params, np.arange(0, 40))
        assert np.all(np.abs(preds - 2.0) <= 0.01)

    def test_early_stopping_returns_best_validation_params(self):
        rng = np.random.default_rng(7)
        mcs = rng.integers(0, 30, 40)
        targets = np.clip(np.round(1 + mcs / 10 + rng.normal(0, 0.5, 40)), 1, 3)
        cfg = TrainConfig(max_epochs=3000, patience=100)
        tr, va = rows_from(mcs[:30], targets[:30]), rows_from(mcs[30:], targets[30:])
        res = train("mc_only", tr, va, cfg)
        assert res.val_curve[res.best_epoch - 1] == min(res.val_curve)
        best = res.model.params.as_array()
        val = batch_loss_and_grad("mc_only", best, mcs[30:].astype(float), None, targets[30:])[0]
        assert val == min(res.val_curve)
        assert len(res.val_curve) <= res.best_epoch + cfg.patience

    def test_deterministic(self):
        corpus = gen_grading_corpus(1, 40, feature_dim=6)
        groups = group_by_patient(corpus)
        mcs = {s.slide_id: mc_for_slide(s)[0] for s in corpus.slides}
        sel = select_slide_per_patient(groups, mcs)
        cfg = TrainConfig(max_epochs=500, seed=4)
        a = fit_patients("combined", sel, cfg).model.to_json()
        b = fit_patients("combined", sel, cfg).model.to_json()
        assert a == b

    def test_divergence_reports_epoch(self):
        mcs = np.arange(30)
        targets = [1.0 + (m > 10) + (m > 20) for m in mcs]
        cfg = TrainConfig(learning_rate=1e6, optimizer="gd", max_epochs=100)
        with pytest.raises(TrainingDivergedError) as info:
            train("image_only", rows_from(mcs[:25], targets[:25], [np.array([[1e3 * m]]) for m in mcs]),
                  rows_from(mcs[25:], targets[25:], [np.array([[1e3 * m]]) for m in mcs[25:]]), cfg)
        assert info.value.epoch >= 1

    def test_feature_kinds_need_features(self):
        with pytest.raises(GradingError):
            train("image_only", rows_from([1, 2], [1, 2]), rows_from([3], [3]))

    def test_image_head_recovers_planted_direction(self):
        dim = 16
        direction = np.random.default_rng(8).standard_normal(dim)
        corpus = gen_grading_corpus(2, 300, feature_dim=dim, feature_direction=direction, feature_signal=1.0)
        groups = group_by_patient(corpus)
        mcs = {s.slide_id: mc_for_slide(s)[0] for s in corpus.slides}
        res = fit_patients("image_only", select_slide_per_patient(groups, mcs), TrainConfig(seed=0))
        head = res.model.params
        raw = head.weights / head.feature_std
        cosine = raw @ direction / (np.linalg.norm(raw) * np.linalg.norm(direction))
        assert cosine > 0.9

    def test_config_validation(self):
        with pytest.raises(GradingError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(GradingError):
            TrainConfig(val_fraction=1.0)
        with pytest.raises(GradingError):
            TrainConfig(optimizer="sgd+")
        assert TrainConfig().lr_for("mc_only") == 0.01
        assert math.isclose(TrainConfig(learning_rate=0.5).lr_for("combined"), 0.5)
