"""Conformalized anomaly p-values with contamination trimming and FDR procedures.

Scores are negative log-likelihoods of uncertainty-normalized residuals under a
density fitted on calibration data (Gaussian or kernel-density); rank-based
p-values against the trimmed calibration set are super-uniform under the null,
and the step-up procedures turn a p-value field into a rejection set with
either the independence-style threshold (BH) or the harmonic correction that
stays valid under arbitrary dependence (BY).
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from safegrid import _kernels

RESIDUAL_EPS = 1e-6
DEFAULT_TRIM = 0.02


def normalize_residuals(y, mu, sigma, eps=RESIDUAL_EPS):
    """z = (y - mu) / (sigma + eps); the floor keeps zero-sigma entries finite."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    return (y - mu) / (sigma + eps)


class GaussianScorer:
    """Score(z) = -log N(z; mean, var) with a variance floor."""

    kind = "gaussian_nll"

    def __init__(self, mean, var, var_floor=1e-12):
        self.mean = float(mean)
        self.var = max(float(var), var_floor)

    def score(self, z):
        z = np.asarray(z, dtype=np.float64)
        return 0.5 * math.log(2.0 * math.pi * self.var) + (z - self.mean) ** 2 / (2.0 * self.var)


class KernelDensityScorer:
    """Score(z) = -log of a Gaussian-kernel density estimate on the sample.

    Bandwidth follows the Silverman rule of thumb
    h = 0.9 * min(std, IQR / 1.34) * n^(-1/5).
    """

    kind = "kernel_density"

    def __init__(self, sample, bandwidth):
        self.sample = np.asarray(sample, dtype=np.float64).ravel()
        self.bandwidth = float(bandwidth)

    def score(self, z):
        scalar = np.ndim(z) == 0
        z_arr = np.atleast_1d(np.asarray(z, dtype=np.float64))
        diff = (z_arr[..., None] - self.sample) / self.bandwidth
        log_kernel = -0.5 * diff**2 - 0.5 * math.log(2.0 * math.pi) - math.log(self.bandwidth)
        m = log_kernel.max(axis=-1, keepdims=True)
        log_density = (m[..., 0] + np.log(np.exp(log_kernel - m).sum(axis=-1))
                       - math.log(self.sample.size))
        out = -log_density
        return float(out[0]) if scalar else out


def fit_scorer(calibration_z, kind="gaussian_nll", min_samples=30):
    """Fit a score provider on calibration residuals; higher score = more anomalous."""
    z = np.asarray(calibration_z, dtype=np.float64).ravel()
    if z.size < min_samples:
        raise ValueError(f"need at least {min_samples} calibration residuals, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise ValueError("calibration residuals must be finite")
    if kind == "gaussian_nll":
        return GaussianScorer(z.mean(), z.var())
    if kind == "kernel_density":
        std = z.std()
        if std == 0:
            raise ValueError("degenerate (zero-variance) sample: kernel density undefined")
        iqr = np.subtract(*np.percentile(z, [75, 25]))
        spread = min(std, iqr / 1.34) if iqr > 0 else std
        bandwidth = 0.9 * spread * z.size ** (-0.2)
        return KernelDensityScorer(z, bandwidth)
    raise ValueError(f"unknown scorer kind {kind!r}")


@dataclass(frozen=True)
class TrimmedCalibration:
    """Calibration scores with the top trim_fraction removed (sorted ascending)."""

    retained: np.ndarray = field(repr=False)
    trim_fraction: float
    original_size: int

    @property
    def n_retained(self):
        return int(self.retained.shape[0])


def trim_calibration(scores, trim_fraction=DEFAULT_TRIM):
    """Drop calibration scores at or above the empirical (1 - tau)-quantile.

    Keeps ceil((1 - tau) * n) scores when values are distinct.  If trimming
    would discard everything (all scores tied at the threshold), the full set
    is retained with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("scores must be nonempty")
    if not 0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")
    ordered = np.sort(scores)
    n = ordered.size
    keep = int(np.ceil((1.0 - trim_fraction) * n))
    if keep >= n:
        retained = ordered
    else:
        threshold = ordered[keep]
        retained = ordered[ordered < threshold]
        if retained.size == 0:
            warnings.warn("trim threshold ties every score; retaining the full set",
                          stacklevel=2)
            retained = ordered
    return TrimmedCalibration(retained=retained, trim_fraction=trim_fraction,
                              original_size=n)


def conformal_pvalue(trimmed, test_scores):
    """p = (1 + #{retained >= s}) / (1 + n'); ties counted with >=."""
    if trimmed.n_retained == 0:
        raise ValueError("trimmed calibration set is empty")
    scalar = np.isscalar(test_scores) or np.ndim(test_scores) == 0
    p = _kernels.conformal_pvalues(trimmed.retained, np.atleast_1d(test_scores))
    return float(p[0]) if scalar else p


def harmonic_number(m):
    """H_m = sum_{i=1}^m 1/i by direct summation."""
    if m <= 0:
        raise ValueError("m must be positive")
    return float(np.sum(1.0 / np.arange(1, m + 1)))


@dataclass(frozen=True)
class RejectionResult:
    reject: np.ndarray = field(repr=False)
    k_star: int
    c_m: float


def _step_up(pvalues, alpha, denom_scale):
    p = np.asarray(pvalues, dtype=np.float64).ravel()
    if p.size == 0:
        return np.zeros(0, dtype=bool), 0
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    p_sorted = np.sort(p)
    k_star = _kernels.step_up_kstar(p_sorted, alpha, denom_scale)
    if k_star == 0:
        return np.zeros(p.shape, dtype=bool), 0
    return p <= p_sorted[k_star - 1], k_star


def bh_procedure(pvalues, alpha):
    """Step-up at thresholds k*alpha/m (valid under independence or PRDS)."""
    reject, k_star = _step_up(pvalues, alpha, 1.0)
    return RejectionResult(reject=reject, k_star=k_star, c_m=1.0)


def by_procedure(pvalues, alpha):
    """Step-up at thresholds k*alpha/(m*c_m); valid under arbitrary dependence."""
    m = np.asarray(pvalues).size
    c_m = harmonic_number(m) if m else 1.0
    reject, k_star = _step_up(pvalues, alpha, c_m)
    return RejectionResult(reject=reject, k_star=k_star, c_m=c_m)


def empirical_fdr(reject, truth):
    """(FDR, power) of a rejection mask against a ground-truth anomaly mask.

    FDR = false rejections / max(total rejections, 1); power = recalled
    anomalies / total anomalies (0 when there are none).
    """
    reject = np.asarray(reject, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if reject.shape != truth.shape:
        raise ValueError("masks must have the same length")
    n_reject = int(reject.sum())
    false_rej = int((reject & ~truth).sum())
    fdr = false_rej / max(n_reject, 1)
    n_true = int(truth.sum())
    power = int((reject & truth).sum()) / n_true if n_true else 0.0
    return fdr, power


@dataclass(frozen=True)
class PValueField:
    """Per-node p-values at one time step plus the rejection decision."""

    pvalues: np.ndarray = field(repr=False)
    reject: np.ndarray = field(repr=False)
    k_star: int
    c_m: float
    alpha: float
    procedure: str

    @property
    def m(self):
        return int(self.pvalues.shape[0])


def detect_step(pvalues, alpha, procedure="by"):
    """Run one time step's multiple-testing procedure over the node p-values."""
    if procedure == "by":
        res = by_procedure(pvalues, alpha)
    elif procedure == "bh":
        res = bh_procedure(pvalues, alpha)
    else:
        raise ValueError(f"unknown procedure {procedure!r}")
    return PValueField(pvalues=np.asarray(pvalues, dtype=np.float64).ravel(),
                       reject=res.reject, k_star=res.k_star, c_m=res.c_m,
                       alpha=alpha, procedure=procedure)
