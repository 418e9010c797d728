"""Trend/residual decomposition of sensor series and the combined-sigma rule."""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DualStreamParams:
    """Moving-average window (softmax-normalized logits) and stream correlation.

    rho = tanh(correlation_raw) stays in (-1, 1); the window weights are a
    convex combination by construction.
    """

    half_width: int
    window_logits: np.ndarray = field(repr=False)
    correlation_raw: float = 0.0

    def __post_init__(self):
        if self.half_width < 0:
            raise ValueError("half_width must be nonnegative")
        logits = np.asarray(self.window_logits, dtype=np.float64).ravel()
        if logits.shape[0] != 2 * self.half_width + 1:
            raise ValueError("window_logits must have length 2*half_width + 1")
        if not np.all(np.isfinite(logits)):
            raise ValueError("window_logits must be finite")
        object.__setattr__(self, "window_logits", logits)

    @property
    def weights(self):
        z = self.window_logits - self.window_logits.max()
        e = np.exp(z)
        return e / e.sum()

    @property
    def rho(self):
        return math.tanh(self.correlation_raw)


def decompose_dual_stream(series, params):
    """Split a series into (trend, residual); trend + residual == input.

    trend_t = sum_k w_k X_{t+k} over the centered window; the series is
    reflect-padded so the output keeps the input length.  Accepts 1-D (time,)
    or 2-D (time, nodes) input.
    """
    x = np.asarray(series, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("series must be 1-D or 2-D (time, nodes)")
    w = params.half_width
    if x.shape[0] < 2 * w + 1:
        raise ValueError(
            f"series length {x.shape[0]} is shorter than the window 2*{w}+1; "
            "shrink half_width or provide more history"
        )
    weights = params.weights
    if w == 0:
        trend = x * weights[0]
    else:
        padded = np.pad(x, ((w, w), (0, 0)), mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * w + 1, axis=0)
        trend = windows @ weights
    residual = x - trend
    if squeeze:
        return trend[:, 0], residual[:, 0]
    return trend, residual


def combine_uncertainty(sigma_trend, sigma_res, rho):
    """Total sigma from two correlated streams.

    sigma_total^2 = sigma_trend^2 + sigma_res^2 + 2*rho*sigma_trend*sigma_res;
    the result always lies in [|s_t - s_r|, s_t + s_r] for rho in (-1, 1).
    """
    st = np.asarray(sigma_trend, dtype=np.float64)
    sr = np.asarray(sigma_res, dtype=np.float64)
    if np.any(st <= 0) or np.any(sr <= 0):
        raise ValueError("stream uncertainties must be strictly positive")
    if not (np.all(np.isfinite(st)) and np.all(np.isfinite(sr))):
        raise ValueError("stream uncertainties must be finite")
    rho_arr = np.asarray(rho, dtype=np.float64)
    if np.any(np.abs(rho_arr) >= 1):
        raise ValueError("rho must lie in (-1, 1)")
    total = np.sqrt(st**2 + sr**2 + 2.0 * rho_arr * st * sr)
    return float(total) if total.ndim == 0 else total
