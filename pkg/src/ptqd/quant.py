"""Uniform fake quantization and clipping-range calibration.

A quantized tensor is simulated in floating point: values are clipped to
``[clip_low, clip_high]``, snapped onto a uniform grid of ``2**bitwidth``
codes, and mapped back to real values.  Weights conventionally use min/max
ranges, activations a symmetric percentile cut; both policies live in
:func:`calibrate_clip_range`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import InvalidConfigError, InvalidInputError, UncalibratedError

GRANULARITIES = ("per-tensor", "per-channel")

# Widening applied to a degenerate (all-equal) calibration range.
DEGENERATE_RANGE_EPS = 1e-6


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties going away from zero.

    numpy's ``round`` uses banker's rounding; the quantization grid is
    defined with the away-from-zero convention instead.
    """
    x = np.asarray(x, dtype=float)
    f = np.floor(x)
    r = x - f  # fractional part; exact whenever x sits on a representable tie
    return f + (r > 0.5) + ((r == 0.5) & (x > 0.0))


@dataclass(frozen=True)
class QuantConfig:
    """Bitwidth, clipping range and granularity for one quantized tensor.

    ``step`` and ``zero_point`` are derived:
    ``step = (clip_high - clip_low) / (2**bitwidth - 1)`` and
    ``zero_point = -clip_low / step``.  For per-channel granularity
    ``clip_low``/``clip_high`` hold one value per channel, and channels run
    along the last axis of the tensors being quantized.
    """

    bitwidth: int
    clip_low: np.ndarray
    clip_high: np.ndarray
    granularity: str = "per-tensor"
    step: np.ndarray = field(init=False)
    zero_point: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (2 <= int(self.bitwidth) <= 16):
            raise InvalidConfigError(f"bitwidth must be in [2, 16], got {self.bitwidth}")
        if self.granularity not in GRANULARITIES:
            raise InvalidConfigError(f"granularity must be one of {GRANULARITIES}")
        low = np.asarray(self.clip_low, dtype=float)
        high = np.asarray(self.clip_high, dtype=float)
        if self.granularity == "per-tensor":
            if low.ndim != 0 or high.ndim != 0:
                raise InvalidConfigError("per-tensor config takes scalar clip bounds")
        else:
            if low.ndim != 1 or low.shape != high.shape:
                raise InvalidConfigError("per-channel config takes matching 1-d clip bounds")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
            raise InvalidConfigError("clip bounds must be finite")
        if not np.all(low < high):
            raise InvalidConfigError("clip_low must be strictly below clip_high")
        step = (high - low) / (2 ** int(self.bitwidth) - 1)
        object.__setattr__(self, "clip_low", low)
        object.__setattr__(self, "clip_high", high)
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "zero_point", -low / step)

    @property
    def n_levels(self) -> int:
        return 2 ** int(self.bitwidth)

    def codebook(self) -> np.ndarray:
        """All representable output values, shape (2**b,) or (2**b, C)."""
        n = np.arange(self.n_levels, dtype=float)
        if self.granularity == "per-tensor":
            return self.step * (n - round_half_away(self.zero_point))
        return self.step[None, :] * (n[:, None] - round_half_away(self.zero_point)[None, :])

    def to_dict(self) -> dict:
        return {
            "bitwidth": int(self.bitwidth),
            "clip_low": self.clip_low.tolist(),
            "clip_high": self.clip_high.tolist(),
            "granularity": self.granularity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(
            bitwidth=int(d["bitwidth"]),
            clip_low=np.asarray(d["clip_low"], dtype=float),
            clip_high=np.asarray(d["clip_high"], dtype=float),
            granularity=d["granularity"],
        )


def quantize_dequantize(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Fake-quantize ``x`` onto the uniform grid described by ``cfg``.

    Elementwise ``step * (round(clip(x, l, u) / step + Z) - round(Z))`` with
    away-from-zero rounding.  Output shape equals input shape; each
    granularity group takes at most ``2**bitwidth`` distinct values.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input to quantize_dequantize contains non-finite values")
    if cfg.granularity == "per-channel":
        if x.ndim < 1 or x.shape[-1] != cfg.clip_low.shape[0]:
            raise InvalidInputError(
                f"per-channel config has {cfg.clip_low.shape[0]} channels, "
                f"input trailing axis is {x.shape[-1] if x.ndim else 'scalar'}"
            )
    clipped = np.clip(x, cfg.clip_low, cfg.clip_high)
    codes = round_half_away(clipped / cfg.step + cfg.zero_point)
    return cfg.step * (codes - round_half_away(cfg.zero_point))


def calibrate_clip_range(
    samples: np.ndarray, mode: str = "minmax", percentile: float | None = None
) -> tuple[float, float]:
    """Derive a clipping range from observed values.

    ``minmax`` returns the exact min and max.  ``percentile`` performs a
    symmetric-tail cut: with ``n`` sorted samples, the upper bound is the
    ``ceil(n * p / 100)``-th smallest value and the lower bound the
    ``ceil(n * (100 - p) / 100)``-th smallest.  A degenerate result is
    widened so the returned range always satisfies ``low < high``.
    """
    flat = np.asarray(samples, dtype=float).ravel()
    if flat.size == 0:
        raise InvalidInputError("cannot calibrate a clip range from an empty sample set")
    if not np.all(np.isfinite(flat)):
        raise InvalidInputError("calibration samples contain non-finite values")
    if mode == "minmax":
        low, high = float(flat.min()), float(flat.max())
    elif mode == "percentile":
        if percentile is None or not (0.0 < percentile < 100.0):
            raise InvalidConfigError("percentile mode requires 0 < p < 100")
        srt = np.sort(flat)
        n = srt.size
        hi_rank = int(np.ceil(n * percentile / 100.0))
        lo_rank = int(np.ceil(n * (100.0 - percentile) / 100.0))
        hi_rank = min(max(hi_rank, 1), n)
        lo_rank = min(max(lo_rank, 1), n)
        low, high = float(srt[lo_rank - 1]), float(srt[hi_rank - 1])
        if low > high:  # p below 50 inverts the cut; keep the pair ordered
            low, high = high, low
    else:
        raise InvalidConfigError(f"unknown calibration mode {mode!r}")
    if low == high:
        low -= DEGENERATE_RANGE_EPS
        high += DEGENERATE_RANGE_EPS
    return low, high


def calibrate_clip_range_per_channel(
    samples: np.ndarray, mode: str = "minmax", percentile: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel variant of :func:`calibrate_clip_range`.

    Channels run along the last axis; every other axis is pooled.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim < 1 or arr.size == 0:
        raise InvalidInputError("per-channel calibration needs a non-empty array")
    n_channels = arr.shape[-1]
    flat = arr.reshape(-1, n_channels)
    lows = np.empty(n_channels)
    highs = np.empty(n_channels)
    for c in range(n_channels):
        lows[c], highs[c] = calibrate_clip_range(flat[:, c], mode=mode, percentile=percentile)
    return lows, highs


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Scikit-learn style fake quantizer.

    ``fit`` calibrates the clipping range from data, ``transform`` applies
    the quantize-dequantize mapping.  With per-channel granularity the
    channels are taken along the last axis of ``X``.
    """

    def __init__(self, bitwidth=8, mode="minmax", percentile=99.9, granularity="per-tensor"):
        self.bitwidth = bitwidth
        self.mode = mode
        self.percentile = percentile
        self.granularity = granularity

    def fit(self, X, y=None):
        p = self.percentile if self.mode == "percentile" else None
        if self.granularity == "per-channel":
            low, high = calibrate_clip_range_per_channel(X, mode=self.mode, percentile=p)
        else:
            low, high = calibrate_clip_range(X, mode=self.mode, percentile=p)
        self.config_ = QuantConfig(
            bitwidth=self.bitwidth,
            clip_low=np.asarray(low, dtype=float),
            clip_high=np.asarray(high, dtype=float),
            granularity=self.granularity,
        )
        return self

    def transform(self, X):
        if not hasattr(self, "config_"):
            raise UncalibratedError("UniformQuantizer.transform called before fit")
        return quantize_dequantize(X, self.config_)
