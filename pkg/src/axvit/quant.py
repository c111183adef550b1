"""Symmetric affine quantization with histogram-percentile calibration.

Real values map to signed integers through ``real = scale * q`` (zero point
fixed at 0). The scale comes from a percentile of the histogram of absolute
values collected during calibration, and training support is provided through
a straight-through-estimator gradient that passes inside the clip range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_NUM_BINS = 2048
DEFAULT_PERCENTILE = 99.9


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters (symmetric, zero point 0)."""

    scale: float
    bitwidth: int
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization (zero_point=0) is supported")

    @property
    def qmax(self) -> int:
        return (1 << (self.bitwidth - 1)) - 1

    @property
    def clip(self) -> float:
        return self.scale * self.qmax


class HistogramCalibrator:
    """Collects |value| histograms and derives a percentile clip threshold."""

    def __init__(self, num_bins: int = DEFAULT_NUM_BINS,
                 percentile: float = DEFAULT_PERCENTILE):
        if num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if not 0 < percentile <= 100:
            raise ValueError("percentile must be in (0, 100]")
        self.num_bins = num_bins
        self.percentile = percentile
        self.observed_max = 0.0
        self.counts = np.zeros(num_bins, dtype=np.float64)
        self.total = 0

    def observe(self, values) -> "HistogramCalibrator":
        """Accumulate absolute values; grows the range by rebinning if needed."""
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return self
        if not np.isfinite(values).all():
            raise ValueError("calibration data contains NaN or Inf")
        absv = np.abs(values)
        new_max = float(absv.max())
        if new_max > self.observed_max:
            if self.total:
                self.counts = _rebin(self.counts, self.observed_max, new_max)
            self.observed_max = new_max
        if self.observed_max == 0.0:
            self.counts[0] += values.size  # only zeros seen so far
        else:
            hist, _ = np.histogram(absv, bins=self.num_bins,
                                   range=(0.0, self.observed_max))
            self.counts += hist
        self.total += values.size
        return self

    def clip_value(self) -> float:
        """Smallest bin upper edge whose cumulative fraction reaches the percentile."""
        if self.total == 0:
            raise RuntimeError("calibrator has no observations")
        if self.observed_max == 0.0:
            raise RuntimeError("all observed values are zero; cannot derive a scale")
        if self.percentile == 100.0:
            return self.observed_max  # exact max tracking
        cum = np.cumsum(self.counts) / self.total
        # tolerance so an exact-fraction boundary (e.g. 999/1000 at 99.9)
        # is not missed to one ulp of float rounding
        idx = int(np.argmax(cum >= self.percentile / 100.0 - 1e-9))
        return (idx + 1) * self.observed_max / self.num_bins

    def compute_scale(self, bitwidth: int) -> QuantParams:
        clip = self.clip_value()
        return QuantParams(scale=clip / ((1 << (bitwidth - 1)) - 1), bitwidth=bitwidth)


def _rebin(counts: np.ndarray, old_max: float, new_max: float) -> np.ndarray:
    """Redistribute counts proportionally onto bins covering [0, new_max]."""
    num_bins = counts.size
    new = np.zeros_like(counts)
    w_old = old_max / num_bins
    w_new = new_max / num_bins
    for j in np.nonzero(counts)[0]:
        lo, hi = j * w_old, (j + 1) * w_old
        first = int(lo / w_new)
        last = min(int(np.ceil(hi / w_new)), num_bins)
        for nb in range(first, last):
            overlap = min(hi, (nb + 1) * w_new) - max(lo, nb * w_new)
            if overlap > 0:
                new[nb] += counts[j] * overlap / (hi - lo)
    return new


def max_scale(values, bitwidth: int) -> QuantParams:
    """Max-calibrated scale, used for weight tensors whose values are known."""
    amax = float(np.abs(np.asarray(values)).max())
    if amax == 0.0:
        amax = 1e-8  # degenerate all-zero tensor; any scale represents it
    return QuantParams(scale=amax / ((1 << (bitwidth - 1)) - 1), bitwidth=bitwidth)


def quantize(x, qp: QuantParams) -> np.ndarray:
    """Saturating quantization with half-away-from-zero rounding."""
    x = np.asarray(x, dtype=np.float64)
    q = np.sign(x) * np.floor(np.abs(x) / qp.scale + 0.5)
    return np.clip(q, -qp.qmax, qp.qmax).astype(np.int32)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * qp.scale


def fake_quant(x, qp: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, qp), qp)


def fake_quant_ste_grad(upstream_grad, x, qp: QuantParams) -> np.ndarray:
    """STE backward of fake quantization: pass inside the clip, zero outside."""
    upstream_grad = np.asarray(upstream_grad)
    x = np.asarray(x)
    if upstream_grad.shape != x.shape:
        raise ValueError("gradient and input shapes must match")
    return upstream_grad * (np.abs(x) <= qp.clip)


ATTN_WEIGHT_QPARAMS = QuantParams(scale=1.0 / 127.0, bitwidth=8)
"""Fixed scale for softmax outputs in [0, 1] ahead of the attention-value matmul."""


def save_scale_map(scales: dict[str, float], path: str) -> None:
    import json

    with open(path, "w") as f:
        json.dump(dict(sorted(scales.items())), f, indent=2)
        f.write("\n")


def load_scale_map(path: str) -> dict[str, float]:
    import json

    with open(path) as f:
        return json.load(f)
