"""Histogram-percentile calibration and symmetric quantization.

Shows how the 99.9th-percentile clip shrugs off rare outliers that would
otherwise blow up the quantization scale, and checks the round-trip error
bound that the scale implies.
"""

import numpy as np

from axvit import HistogramCalibrator, dequantize, quantize

rng = np.random.default_rng(0)

# 10k well-behaved activations plus a handful of extreme outliers.
values = rng.normal(0.0, 1.0, size=10_000)
values[::2500] = 80.0

cal_max = HistogramCalibrator(percentile=100.0).observe(values)
cal_999 = HistogramCalibrator(percentile=99.9).observe(values)
print("max-calibrated clip:       ", cal_max.clip_value())
print("99.9-percentile clip:      ", round(cal_999.clip_value(), 4))

qp_max = cal_max.compute_scale(8)
qp_999 = cal_999.compute_scale(8)
print("scale (max):               ", qp_max.scale)
print("scale (99.9th percentile): ", qp_999.scale)

# With the outlier-driven scale, the bulk of the data lands on a few integer
# levels; the percentile scale spreads it over the full signed range.
bulk = values[np.abs(values) < 4.0]
print("distinct levels, max scale: ", len(np.unique(quantize(bulk, qp_max))))
print("distinct levels, 99.9 scale:", len(np.unique(quantize(bulk, qp_999))))

# Inside the clip range the round-trip error is bounded by half a quantum.
inside = values[np.abs(values) <= qp_999.clip]
err = np.abs(dequantize(quantize(inside, qp_999), qp_999) - inside)
print("max round-trip error:      ", round(float(err.max()), 6),
      "<= scale/2 =", qp_999.scale / 2)
