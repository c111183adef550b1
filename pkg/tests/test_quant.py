import numpy as np
import pytest

from axvit.quant import (
    HistogramCalibrator,
    QuantParams,
    dequantize,
    fake_quant,
    fake_quant_ste_grad,
    load_scale_map,
    max_scale,
    quantize,
    save_scale_map,
)


class TestQuantParams:
    def test_range_and_clip(self):
        qp = QuantParams(scale=0.5, bitwidth=8)
        assert qp.qmax == 127
        assert qp.clip == 63.5

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            QuantParams(scale=0.0, bitwidth=8)

    def test_rejects_nonzero_zero_point(self):
        with pytest.raises(ValueError):
            QuantParams(scale=1.0, bitwidth=8, zero_point=1)


class TestCalibrator:
    def test_all_zeros_mass_in_first_bin(self):
        cal = HistogramCalibrator(num_bins=16).observe(np.zeros(40))
        assert cal.counts[0] == 40
        assert cal.observed_max == 0.0

    def test_observed_max_uses_absolute_values(self):
        cal = HistogramCalibrator().observe(np.array([-1.0, 1.0]))
        assert cal.observed_max == 1.0

    def test_split_vs_concatenated_observation(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=5000), rng.normal(size=5000) * 2.0
        split = HistogramCalibrator().observe(a).observe(b)
        joint = HistogramCalibrator().observe(np.concatenate([a, b]))
        bin_width = joint.observed_max / joint.num_bins
        assert abs(split.clip_value() - joint.clip_value()) <= bin_width

    def test_scale_examples(self):
        cal = HistogramCalibrator(percentile=100.0).observe(np.array([2.54]))
        assert cal.compute_scale(8).scale == pytest.approx(0.02)
        full = HistogramCalibrator(percentile=100.0).observe(
            np.linspace(-127.0, 127.0, 1000))
        assert full.compute_scale(8).scale == pytest.approx(1.0)

    def test_percentile_ignores_rare_outlier(self):
        rng = np.random.default_rng(1)
        vals = rng.uniform(-1.0, 1.0, size=1000)
        vals[500] = 100.0
        cal = HistogramCalibrator(percentile=99.9).observe(vals)
        bin_width = cal.observed_max / cal.num_bins
        assert cal.clip_value() <= 1.0 + bin_width

    def test_percentile_100_is_exact_max(self):
        vals = np.array([0.3, -2.7, 1.1])
        cal = HistogramCalibrator(percentile=100.0).observe(vals)
        assert cal.clip_value() == 2.7

    def test_percentile_100_clip_ge_999(self):
        rng = np.random.default_rng(2)
        vals = rng.normal(size=20000)
        c100 = HistogramCalibrator(percentile=100.0).observe(vals).clip_value()
        c999 = HistogramCalibrator(percentile=99.9).observe(vals).clip_value()
        assert c100 >= c999

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="NaN or Inf"):
            HistogramCalibrator().observe(np.array([1.0, np.nan]))
        with pytest.raises(ValueError, match="NaN or Inf"):
            HistogramCalibrator().observe(np.array([np.inf]))

    def test_empty_calibrator_raises(self):
        with pytest.raises(RuntimeError):
            HistogramCalibrator().clip_value()

    def test_rebinning_preserves_total_mass(self):
        cal = HistogramCalibrator(num_bins=64)
        cal.observe(np.linspace(0.1, 1.0, 500))
        cal.observe(np.array([10.0]))
        assert cal.counts.sum() == pytest.approx(501)

    def test_scale_monotone_in_clip(self):
        small = HistogramCalibrator(percentile=100.0).observe(np.array([1.0]))
        large = HistogramCalibrator(percentile=100.0).observe(np.array([4.0]))
        assert large.compute_scale(8).scale > small.compute_scale(8).scale


class TestQuantizeDequantize:
    def test_examples(self):
        qp = QuantParams(scale=1.0, bitwidth=8)
        assert quantize(0.0, qp) == 0
        assert quantize(0.5, qp) == 1
        assert quantize(-0.5, qp) == -1
        assert quantize(3.14, QuantParams(scale=0.02, bitwidth=8)) == 127

    def test_saturates(self):
        qp = QuantParams(scale=1.0, bitwidth=8)
        assert quantize(1e9, qp) == 127
        assert quantize(-1e9, qp) == -127

    def test_dequantize_examples(self):
        qp = QuantParams(scale=1.0, bitwidth=8)
        assert dequantize(0, qp) == 0.0
        assert dequantize(127, qp) == 127.0

    def test_round_trip_error_bound(self):
        rng = np.random.default_rng(3)
        qp = QuantParams(scale=0.04, bitwidth=8)
        x = rng.uniform(-qp.clip, qp.clip, size=20000)
        err = np.abs(fake_quant(x, qp) - x)
        assert err.max() <= qp.scale / 2 + 1e-12

    def test_weight_max_scale(self):
        qp = max_scale(np.array([-6.35, 1.0]), 8)
        assert qp.scale == pytest.approx(0.05)
        assert max_scale(np.zeros(4), 8).scale > 0


class TestSteGradient:
    def test_pass_inside_zero_outside(self):
        qp = QuantParams(scale=1.0, bitwidth=8)
        x = np.array([0.0, 100.0, 2 * qp.clip, -300.0])
        g = np.ones_like(x)
        out = fake_quant_ste_grad(g, x, qp)
        assert np.array_equal(out, [1.0, 1.0, 0.0, 0.0])

    def test_is_binary_mask_times_upstream(self):
        rng = np.random.default_rng(4)
        qp = QuantParams(scale=0.1, bitwidth=8)
        x = rng.normal(scale=10.0, size=1000)
        g = rng.normal(size=1000)
        out = fake_quant_ste_grad(g, x, qp)
        mask = out / np.where(g == 0, 1.0, g)
        assert set(np.round(mask, 12)) <= {0.0, 1.0}

    def test_matches_clamp_finite_difference(self):
        # Away from the clip kink and rounding steps, fake quantization is
        # locally flat but its STE surrogate is the clamp's derivative.
        qp = QuantParams(scale=1.0, bitwidth=8)
        eps = 1e-4
        def clamp(x):
            return np.clip(x, -qp.clip, qp.clip)
        for x in (3.3, -50.2, 126.4, 200.0, -140.5):
            fd = (clamp(x + eps) - clamp(x - eps)) / (2 * eps)
            ste = fake_quant_ste_grad(np.array(1.0), np.array(x), qp)
            assert abs(float(ste) - fd) < 1e-6

    def test_shape_mismatch(self):
        qp = QuantParams(scale=1.0, bitwidth=8)
        with pytest.raises(ValueError):
            fake_quant_ste_grad(np.ones(3), np.ones(4), qp)


class TestScaleMap:
    def test_roundtrip(self, tmp_path):
        scales = {"block0.q": 0.031, "block1.w1": 0.0044}
        path = str(tmp_path / "scales.json")
        save_scale_map(scales, path)
        assert load_scale_map(path) == scales
