import numpy as np
import pytest

from mitograde.grading import LogisticParams, logistic_forward
from mitograde.ingest import group_by_patient, save_corpus
from mitograde.roi import mc_for_slide
from mitograde.synth import (
    CUTOFFS,
    Hotspot,
    add_false_positives,
    cutoff_grade,
    gen_detection_benchmark,
    gen_grading_corpus,
    gen_slide,
    sample_mc,
    subseed_rng,
    truths_for,
)
from mitograde.types import SlideGeometry

GEOM = SlideGeometry(10000, 8000, 0.5)


class TestGenSlide:
    def test_empty(self):
        assert gen_slide(0, GEOM).detections == ()

    @pytest.mark.parametrize("seed", range(5))
    def test_planted_count_is_exact(self, seed):
        slide = gen_slide(seed, GEOM, 0.0, Hotspot((5000.0, 4000.0), 12, 600.0))
        assert mc_for_slide(slide)[0] == 12

    @pytest.mark.parametrize("rate", [1.0, 5.0])
    def test_planted_count_survives_background(self, rate):
        for seed in range(5):
            slide = gen_slide(seed, GEOM, rate, Hotspot((3000.0, 3000.0), 6, 600.0))
            assert len(slide.detections) > 6
            assert mc_for_slide(slide)[0] == 6

    def test_background_limit_without_hotspot(self):
        slide = gen_slide(1, GEOM, 20.0, background_limit=3)
        assert 0 < mc_for_slide(slide)[0] <= 3

    def test_deterministic(self):
        a = gen_slide(9, GEOM, 2.0, Hotspot((5000.0, 4000.0), 5, 500.0), index=3)
        b = gen_slide(9, GEOM, 2.0, Hotspot((5000.0, 4000.0), 5, 500.0), index=3)
        assert a == b
        assert a != gen_slide(9, GEOM, 2.0, Hotspot((5000.0, 4000.0), 5, 500.0), index=4)

    def test_infeasible_hotspot(self):
        with pytest.raises(ValueError):
            gen_slide(0, GEOM, 0.0, Hotspot((5000.0, 4000.0), 5, 2000.0))
        with pytest.raises(ValueError):
            gen_slide(0, GEOM, 0.0, Hotspot((100.0, 4000.0), 5, 600.0))

    def test_negative_rate(self):
        with pytest.raises(ValueError):
            gen_slide(0, GEOM, -1.0)

    def test_confidence_range(self):
        slide = gen_slide(2, GEOM, 3.0, Hotspot((5000.0, 4000.0), 8, 500.0), tp_confidence=(0.6, 0.9))
        conf = [d.confidence for d in slide.detections]
        assert min(conf) >= 0.6 and max(conf) < 0.9


class TestRandomness:
    def test_subseed_streams_are_independent(self):
        a = subseed_rng(5, 0).uniform(size=4)
        assert not np.array_equal(a, subseed_rng(5, 1).uniform(size=4))
        assert not np.array_equal(a, subseed_rng(6, 0).uniform(size=4))
        np.testing.assert_array_equal(a, subseed_rng(5, 0).uniform(size=4))

    def test_mc_distribution_is_skewed_and_capped(self):
        mcs = sample_mc(np.random.default_rng(0), 5000)
        assert mcs.min() >= 0 and mcs.max() <= 60
        assert np.mean(mcs < 4) > 0.4
        assert np.mean(mcs > 15) > 0.05


class TestGradingCorpus:
    def test_cutoff_rule(self):
        assert [cutoff_grade(m) for m in (0, 3, 4, 15, 16)] == [1, 1, 2, 2, 3]

    def test_grades_recomputable_from_mc(self):
        corpus = gen_grading_corpus(3, 50)
        for pid, slides, label in group_by_patient(corpus):
            top = max(mc_for_slide(s)[0] for s in slides)
            assert label.who_grade == cutoff_grade(top, CUTOFFS)
            # the first slide carries the patient's MC
            assert mc_for_slide(slides[0])[0] == top

    def test_logistic_rule(self):
        planted = LogisticParams(0.3, -3.0, 2.0, 1.0)
        corpus = gen_grading_corpus(4, 30, planted)
        for pid, slides, label in group_by_patient(corpus):
            top = max(mc_for_slide(s)[0] for s in slides)
            expected = min(3, max(1, int(np.floor(float(logistic_forward(planted, top)) + 0.5))))
            assert label.who_grade == expected

    def test_shape_of_training_set(self):
        corpus = gen_grading_corpus(0, 341, max_slides=3)
        groups = group_by_patient(corpus)
        assert len(groups) == 341
        assert all(1 <= len(g[1]) <= 3 for g in groups)

    def test_exact_slide_total(self):
        corpus = gen_grading_corpus(0, 341, total_slides=951)
        groups = group_by_patient(corpus)
        assert len(groups) == 341
        assert sum(len(g[1]) for g in groups) == 951
        with pytest.raises(ValueError):
            gen_grading_corpus(0, 20, total_slides=61)

    def test_minimum_patients(self):
        with pytest.raises(ValueError):
            gen_grading_corpus(0, 9)

    def test_features(self):
        corpus = gen_grading_corpus(1, 12, feature_dim=7, patches_per_slide=3)
        assert all(len(s.patch_features) == 3 and s.patch_features[0].dim == 7 for s in corpus.slides)

    def test_files_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            save_corpus(gen_grading_corpus(8, 20, feature_dim=4, background_rate=1.0), tmp_path / d)
        for name in ("slides.csv", "detections.csv", "labels.csv", "features.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestDetectionBenchmark:
    def test_planted_fractions(self):
        dets, truths = gen_detection_benchmark(0, SlideGeometry(5000, 5000, 0.25), 80, 0.2, 0.4)
        assert len(dets) == 100
        fp = [d for d in dets if d.confidence < 0.4]
        assert len(fp) == 20
        assert sum(t.is_mitotic for t in truths) == 80

    def test_slide_too_small(self):
        with pytest.raises(ValueError):
            gen_detection_benchmark(0, SlideGeometry(300, 300, 0.25), 80)

    def test_add_false_positives(self):
        slide = gen_slide(0, GEOM, 0.0, Hotspot((5000.0, 4000.0), 8, 500.0))
        noisy = add_false_positives(slide, 0, 0, 0.2)
        assert len(noisy.detections) == 10
        assert len(truths_for(noisy)) == 8
        assert add_false_positives(slide, 0, 0, 0.0) is slide
