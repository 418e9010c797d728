"""Pre-conformal calibration diagnostics: PIT uniformity and reliability curves."""

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri


def pit_values(mu, sigma, y):
    """Probability integral transform and its KS distance from uniform.

    PIT_i = Phi((y_i - mu_i) / sigma_i); for a calibrated Gaussian forecast the
    sample is uniform on [0, 1].
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    pit = ndtr((y - mu) / sigma)
    ks = float(stats.kstest(pit, "uniform").statistic)
    return pit, ks


def reliability_curve(mu, sigma, y, levels):
    """Empirical coverage of central Gaussian intervals at each nominal level.

    Returns (coverages, mean absolute calibration error).  For level q the
    interval is mu +/- z * sigma with z = Phi^{-1}((1 + q) / 2).
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    levels = np.asarray(levels, dtype=np.float64).ravel()
    if np.any((levels <= 0) | (levels >= 1)):
        raise ValueError("levels must lie in (0, 1)")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    z = ndtri((1.0 + levels) / 2.0)
    inside = np.abs(y - mu)[None, :] <= z[:, None] * sigma[None, :]
    coverage = inside.mean(axis=1)
    return coverage, float(np.mean(np.abs(coverage - levels)))
