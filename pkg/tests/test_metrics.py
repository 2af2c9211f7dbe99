import numpy as np
import pytest

from defectdiff import metrics
from defectdiff.metrics import FeatureSet, SaliencyEval

from oracles import (
    oracle_e_measure_max,
    oracle_f_measure_max,
    oracle_fid_diagonal,
    oracle_fid_sqrtm,
    oracle_mae,
    oracle_s_measure,
)


def feature_set(arr, extractor_id="test"):
    return FeatureSet(features=np.asarray(arr, dtype=np.float64), extractor_id=extractor_id)


def random_eval(rng, size=8, quantized=False):
    pred = rng.random((size, size))
    if quantized:
        pred = np.round(pred * 16) / 16
    gt = (rng.random((size, size)) < rng.uniform(0.1, 0.9)).astype(np.float64)
    return SaliencyEval(prediction=pred, ground_truth=gt)


class TestFid:
    def test_identical_sets_score_zero(self):
        rng = np.random.default_rng(0)
        x = feature_set(rng.normal(size=(20, 5)))
        assert abs(metrics.fid(x, x)) <= 1e-6

    def test_mean_shift_1d(self):
        # Sample mean 0 vs 3, both sample variances exactly 1.
        a = feature_set([[-1.0], [0.0], [1.0]])
        b = feature_set([[2.0], [3.0], [4.0]])
        assert metrics.fid(a, b) == pytest.approx(9.0, abs=1e-9)

    def test_variance_gap_1d(self):
        a = feature_set([[-1.0], [0.0], [1.0]])  # variance 1
        b = feature_set([[-2.0], [0.0], [2.0]])  # variance 4
        assert metrics.fid(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_diagonal_covariance_matches_closed_form(self):
        # Columns built from orthogonal sign patterns have exactly diagonal
        # sample covariance, so the element-wise Gaussian formula is exact.
        patterns = np.array(
            [[1, 1, -1, -1], [1, -1, 1, -1], [1, -1, -1, 1]], dtype=np.float64
        ).T
        rng = np.random.default_rng(7)
        for _ in range(10):
            scale_r, scale_g = rng.uniform(0.5, 2.0, size=3), rng.uniform(0.5, 2.0, size=3)
            mean_r, mean_g = rng.normal(size=3), rng.normal(size=3)
            xr = patterns * scale_r + mean_r
            xg = patterns * scale_g + mean_g
            var_r = (patterns * scale_r).var(axis=0, ddof=1)
            var_g = (patterns * scale_g).var(axis=0, ddof=1)
            expected = oracle_fid_diagonal(mean_r, mean_g, var_r, var_g)
            got = metrics.fid(feature_set(xr), feature_set(xg))
            assert got == pytest.approx(expected, abs=1e-6)

    def test_matches_general_sqrtm_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            xr = rng.normal(size=(40, 6))
            xg = rng.normal(size=(50, 6)) * 1.5 + 0.3
            assert metrics.fid(feature_set(xr), feature_set(xg)) == pytest.approx(
                oracle_fid_sqrtm(xr, xg), abs=1e-6
            )

    def test_symmetry(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            a = feature_set(rng.normal(size=(30, 4)))
            b = feature_set(rng.normal(size=(25, 4)) + 1.0)
            assert abs(metrics.fid(a, b) - metrics.fid(b, a)) <= 1e-6

    def test_extractor_mismatch_rejected(self):
        a = feature_set(np.zeros((3, 2)), "ae")
        b = feature_set(np.zeros((3, 2)), "other")
        with pytest.raises(ValueError, match="extractor"):
            metrics.fid(a, b)

    def test_too_few_samples_rejected(self):
        a = feature_set(np.zeros((1, 2)))
        with pytest.raises(ValueError, match="2 samples"):
            metrics.fid(a, a)

    def test_extract_features_empty_rejected(self):
        class Stub:
            extractor_id = "stub"

            def __call__(self, images):
                return np.zeros((len(images), 4))

        with pytest.raises(ValueError, match="empty"):
            metrics.extract_features(np.zeros((0, 1, 8, 8)), Stub())

    def test_extract_features_shape_and_determinism(self):
        class Stub:
            extractor_id = "stub"

            def __call__(self, images):
                return images.reshape(len(images), -1)[:, :4]

        images = np.random.default_rng(0).random((5, 1, 4, 4))
        f1 = metrics.extract_features(images, Stub())
        f2 = metrics.extract_features(images, Stub())
        assert f1.features.shape == (5, 4)
        assert np.array_equal(f1.features, f2.features)


class TestMae:
    def test_perfect(self):
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1
        assert metrics.mae(SaliencyEval(gt.copy(), gt)) == 0.0

    def test_inverted(self):
        gt = np.zeros((4, 4))
        gt[0] = 1
        assert metrics.mae(SaliencyEval(1.0 - gt, gt)) == 1.0

    def test_constant_half(self):
        gt = (np.random.default_rng(0).random((6, 6)) > 0.5).astype(float)
        assert metrics.mae(SaliencyEval(np.full((6, 6), 0.5), gt)) == 0.5


class TestFMeasure:
    def test_perfect_binary_prediction(self):
        gt = np.zeros((8, 8))
        gt[:, :3] = 1
        assert metrics.f_measure_max(SaliencyEval(gt.copy(), gt)) == pytest.approx(1.0)

    def test_all_zero_prediction_scores_zero(self):
        gt = np.zeros((8, 8))
        gt[2:5, 2:5] = 1
        assert metrics.f_measure_max(SaliencyEval(np.zeros((8, 8)), gt)) == 0.0

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError, match="all-zero"):
            metrics.f_measure_max(SaliencyEval(np.ones((4, 4)) * 0.5, np.zeros((4, 4))))

    def test_hand_case_matches_sweep_oracle(self):
        gt = np.zeros((4, 4))
        gt[:, :2] = 1  # left half
        pred = np.zeros((4, 4))
        pred[:, :2] = 0.8
        pred[:2, 2:] = 0.6
        ev = SaliencyEval(pred, gt)
        assert metrics.f_measure_max(ev) == pytest.approx(
            oracle_f_measure_max(pred, gt), abs=1e-12
        )

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(42)
        for i in range(30):
            ev = random_eval(rng, quantized=i % 2 == 0)
            if not ev.ground_truth.any():
                continue
            assert metrics.f_measure_max(ev) == pytest.approx(
                oracle_f_measure_max(ev.prediction, ev.ground_truth), abs=1e-9
            )


class TestSMeasure:
    def test_perfect_binary_prediction(self):
        gt = np.zeros((8, 8))
        gt[2:6, 1:5] = 1
        assert metrics.s_measure(SaliencyEval(gt.copy(), gt)) == pytest.approx(1.0, abs=1e-6)

    def test_inverted_half_plane_matches_oracle(self):
        gt = np.zeros((8, 8))
        gt[:, :4] = 1
        pred = 1.0 - gt
        ev = SaliencyEval(pred, gt)
        assert metrics.s_measure(ev) == pytest.approx(oracle_s_measure(pred, gt), abs=1e-9)

    def test_degenerate_ground_truths(self):
        pred = np.full((5, 5), 0.25)
        assert metrics.s_measure(SaliencyEval(pred, np.zeros((5, 5)))) == pytest.approx(0.75)
        assert metrics.s_measure(SaliencyEval(pred, np.ones((5, 5)))) == pytest.approx(0.25)

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(5)
        for i in range(30):
            ev = random_eval(rng, quantized=i % 3 == 0)
            assert metrics.s_measure(ev) == pytest.approx(
                oracle_s_measure(ev.prediction, ev.ground_truth), abs=1e-9
            )


class TestEMeasure:
    def test_perfect_binary_prediction(self):
        gt = np.zeros((8, 8))
        gt[1:4, 2:7] = 1
        assert metrics.e_measure_max(SaliencyEval(gt.copy(), gt)) == pytest.approx(1.0, abs=1e-6)

    def test_inverted_matches_oracle(self):
        gt = np.zeros((8, 8))
        gt[:, :4] = 1
        pred = 1.0 - gt
        ev = SaliencyEval(pred, gt)
        assert metrics.e_measure_max(ev) == pytest.approx(
            oracle_e_measure_max(pred, gt), abs=1e-9
        )

    def test_degenerate_ground_truths(self):
        rng = np.random.default_rng(0)
        pred = rng.random((6, 6))
        for gt in (np.zeros((6, 6)), np.ones((6, 6))):
            ev = SaliencyEval(pred, gt)
            assert metrics.e_measure_max(ev) == pytest.approx(
                oracle_e_measure_max(pred, gt), abs=1e-9
            )

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(9)
        for i in range(30):
            ev = random_eval(rng, quantized=i % 2 == 0)
            assert metrics.e_measure_max(ev) == pytest.approx(
                oracle_e_measure_max(ev.prediction, ev.ground_truth), abs=1e-9
            )


class TestThresholdSweepInvariance:
    def test_affine_rescale_with_matched_thresholds(self):
        # Shrinking the prediction and the thresholds by the same affine map
        # preserves every binarization, hence both swept maxima.
        rng = np.random.default_rng(21)
        for _ in range(10):
            ev = random_eval(rng)
            if not ev.ground_truth.any():
                continue
            a, b = 0.5, 0.2
            scaled = SaliencyEval(a * ev.prediction + b, ev.ground_truth)
            thresholds = a * metrics.DEFAULT_THRESHOLDS + b
            assert metrics.f_measure_max(scaled, thresholds=thresholds) == pytest.approx(
                metrics.f_measure_max(ev), abs=1e-12
            )
            assert metrics.e_measure_max(scaled, thresholds=thresholds) == pytest.approx(
                metrics.e_measure_max(ev), abs=1e-12
            )


class TestIdealValues:
    def test_all_four_metrics_at_ideal(self):
        rng = np.random.default_rng(33)
        for _ in range(5):
            gt = (rng.random((8, 8)) < 0.4).astype(float)
            if not gt.any() or gt.all():
                continue
            ev = SaliencyEval(gt.copy(), gt)
            assert metrics.s_measure(ev) == pytest.approx(1.0, abs=1e-6)
            assert metrics.mae(ev) == pytest.approx(0.0, abs=1e-6)
            assert metrics.e_measure_max(ev) == pytest.approx(1.0, abs=1e-6)
            assert metrics.f_measure_max(ev) == pytest.approx(1.0, abs=1e-6)

    def test_mae_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        ev = random_eval(rng)
        assert metrics.mae(ev) == pytest.approx(
            oracle_mae(ev.prediction, ev.ground_truth), abs=1e-12
        )


class TestSaliencyEvalValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            SaliencyEval(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_out_of_range_prediction(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            SaliencyEval(np.full((4, 4), 1.5), np.zeros((4, 4)))

    def test_nonbinary_gt(self):
        with pytest.raises(ValueError, match="binary"):
            SaliencyEval(np.zeros((4, 4)), np.full((4, 4), 0.5))


class TestMetricReport:
    def test_aggregate_is_category_mean(self):
        report = metrics.MetricReport(
            per_category={
                "a": {"s_measure": 0.8, "mae": 0.1},
                "b": {"s_measure": 0.6, "mae": 0.3},
            }
        )
        assert report.aggregate["s_measure"] == pytest.approx(0.7, abs=1e-12)
        assert report.aggregate["mae"] == pytest.approx(0.2, abs=1e-12)

    def test_csv_roundtrip_layout(self):
        report = metrics.MetricReport(per_category={"a": {"fid": 12.5}})
        text = report.to_csv()
        assert "category,metric,value" in text
        assert "a,fid,12.5" in text
        assert "AVG,fid,12.5" in text

    def test_out_of_range_value_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            metrics.MetricReport(per_category={"a": {"s_measure": 1.5}})
