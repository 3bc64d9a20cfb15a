"""Confusion matrix, IoU scoring and the benchmark harness."""

import numpy as np
import pytest

from sfalign import tensor as T
from sfalign.metrics import (ConfusionMatrix, benchmark_forward, compare_latency,
                             evaluate, miou)
from sfalign.model import ModelConfig, init_params, model_forward

from oracles import confusion_loops, miou_loops

SMALL = dict(stage_channels=(8, 16, 24, 32), fpn_channels=16, num_classes=3,
             norm_groups=4)


class TestConfusionMatrix:
    def test_perfect_prediction_fills_diagonal(self, rng):
        gt = rng.integers(0, 4, size=(10, 10))
        cm = ConfusionMatrix(4).update(gt, gt)
        assert cm.counts.sum() == 100
        assert np.trace(cm.counts) == 100

    def test_all_ignored_counts_nothing(self):
        cm = ConfusionMatrix(3)
        cm.update(np.zeros((4, 4), dtype=int), np.full((4, 4), 255))
        assert cm.counts.sum() == 0
        assert cm.ignored == 16

    def test_matches_brute_force(self, rng):
        for _ in range(5):
            pred = rng.integers(0, 5, size=(16, 16))
            gt = rng.integers(0, 6, size=(16, 16))
            gt[gt == 5] = 255  # sprinkle ignores
            cm = ConfusionMatrix(5).update(pred, gt)
            assert np.array_equal(cm.counts, confusion_loops(pred, gt, 5))

    def test_conservation_of_pixels(self, rng):
        cm = ConfusionMatrix(4)
        total = 0
        for _ in range(4):
            pred = rng.integers(0, 4, size=(7, 9))
            gt = rng.integers(0, 5, size=(7, 9))
            gt[gt == 4] = 255
            cm.update(pred, gt)
            total += pred.size
        assert cm.counts.sum() + cm.ignored == total

    def test_rejects_out_of_range(self):
        cm = ConfusionMatrix(3)
        with pytest.raises(ValueError, match="prediction"):
            cm.update(np.array([3]), np.array([0]))
        with pytest.raises(ValueError, match="label"):
            cm.update(np.array([0]), np.array([7]))

    def test_merge_equals_concatenated_update(self, rng):
        p1, g1 = rng.integers(0, 3, size=(8, 8)), rng.integers(0, 3, size=(8, 8))
        p2, g2 = rng.integers(0, 3, size=(8, 8)), rng.integers(0, 3, size=(8, 8))
        a = ConfusionMatrix(3).update(p1, g1)
        b = ConfusionMatrix(3).update(p2, g2)
        whole = ConfusionMatrix(3).update(np.concatenate([p1, p2]),
                                          np.concatenate([g1, g2]))
        a.merge(b)
        assert np.array_equal(a.counts, whole.counts)


class TestMiou:
    def test_hand_case_seven_twelfths(self):
        cm = ConfusionMatrix(2).update(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0]))
        mean, per_class = miou(cm)
        assert abs(per_class[0] - 2 / 3) < 1e-15
        assert abs(per_class[1] - 1 / 2) < 1e-15
        assert abs(mean - 7 / 12) < 1e-15

    def test_perfect_is_one(self, rng):
        gt = rng.integers(0, 3, size=(20, 20))
        mean, per_class = miou(ConfusionMatrix(3).update(gt, gt))
        assert mean == 1.0 and all(v == 1.0 for v in per_class)

    def test_matches_brute_force(self, rng):
        for _ in range(5):
            pred = rng.integers(0, 4, size=(12, 12))
            gt = rng.integers(0, 4, size=(12, 12))
            cm = ConfusionMatrix(4).update(pred, gt)
            mean, per_class = miou(cm)
            want_mean, want_list = miou_loops(cm.counts)
            assert abs(mean - want_mean) < 1e-12
            assert np.allclose([v for v in per_class if v is not None], want_list)

    def test_absent_class_excluded(self):
        pred = np.array([0, 0, 1, 1])
        gt = np.array([0, 0, 1, 1])
        mean, per_class = miou(ConfusionMatrix(3).update(pred, gt))
        assert per_class[2] is None
        assert mean == 1.0

    def test_all_absent_is_an_error(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ValueError, match="absent"):
            miou(cm)

    def test_permutation_equivariance(self, rng):
        pred = rng.integers(0, 5, size=(30, 30))
        gt = rng.integers(0, 5, size=(30, 30))
        mean, per_class = miou(ConfusionMatrix(5).update(pred, gt))
        perm = rng.permutation(5)
        mean_p, per_class_p = miou(ConfusionMatrix(5).update(perm[pred], perm[gt]))
        assert abs(mean - mean_p) < 1e-12
        for c in range(5):
            assert abs(per_class[c] - per_class_p[perm[c]]) < 1e-12

    def test_bounds(self, rng):
        for _ in range(10):
            pred = rng.integers(0, 3, size=(9, 9))
            gt = rng.integers(0, 3, size=(9, 9))
            _, per_class = miou(ConfusionMatrix(3).update(pred, gt))
            assert all(v is None or 0.0 <= v <= 1.0 for v in per_class)

    def test_uniform_random_approaches_one_over_2c_minus_one(self):
        # with balanced gt and uniform pred, TP_c ~ N/C^2, FP+FN ~ 2N/C(1-1/C),
        # so IoU_c -> 1/(2C-1)
        rng = np.random.default_rng(7)
        c = 4
        n = 1_000_000
        gt = np.repeat(np.arange(c), n // c)
        pred = rng.integers(0, c, size=n)
        mean, _ = miou(ConfusionMatrix(c).update(pred, gt))
        assert abs(mean - 1 / (2 * c - 1)) < 0.01

    def test_pixel_accuracy_hand_case(self):
        cm = ConfusionMatrix(2).update(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0]))
        assert abs(cm.pixel_accuracy() - 3 / 4) < 1e-15


class TestBenchmark:
    def test_reports_spread_and_fingerprint(self):
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, np.random.default_rng(0))
        out = benchmark_forward(params, cfg, (1, 3, 32, 32), n_warmup=1, n_runs=3)
        assert np.isfinite(out["std_ms"]) and out["median_ms"] > 0
        assert len(out["times_ms"]) == 3
        assert out["env"]["numpy"] and out["env"]["cpu_count"] >= 1

    def test_larger_input_is_slower(self):
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, np.random.default_rng(0))
        small = benchmark_forward(params, cfg, (1, 3, 32, 32), n_warmup=2, n_runs=5)
        big = benchmark_forward(params, cfg, (1, 3, 128, 128), n_warmup=2, n_runs=5)
        assert big["median_ms"] > small["median_ms"]

    def test_rejects_too_few_runs(self):
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError, match="n_runs"):
            benchmark_forward(params, cfg, (1, 3, 32, 32), n_runs=2)

    def test_compare_latency_interleaves_and_reports_ratio(self):
        cfg_a = ModelConfig(**SMALL)
        cfg_b = ModelConfig(use_fam=False, **SMALL)
        pa = init_params(cfg_a, np.random.default_rng(0))
        pb = init_params(cfg_b, np.random.default_rng(0))
        out = compare_latency(pa, cfg_a, pb, cfg_b, (1, 3, 32, 32),
                              n_warmup=1, n_runs=3)
        assert out["ratio"] == pytest.approx(out["median_a_ms"] / out["median_b_ms"])


class TestEvaluate:
    def test_scores_against_direct_forward(self, rng):
        cfg = ModelConfig(**SMALL)
        params = init_params(cfg, np.random.default_rng(3))
        samples = [(rng.uniform(size=(3, 32, 32)), rng.integers(0, 3, size=(32, 32)))
                   for _ in range(3)]
        res = evaluate(params, cfg, samples, batch_size=2)
        cm = ConfusionMatrix(3)
        with T.no_grad():
            for img, lab in samples:
                logits = model_forward(params, cfg, T.Tensor(img[None]))["logits"]
                cm.update(np.argmax(logits.data, axis=1)[0], lab)
        want, _ = miou(cm)
        assert res["miou"] == pytest.approx(want, abs=1e-12)
        assert 0.0 <= res["pixel_acc"] <= 1.0
