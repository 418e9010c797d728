"""Pure-numpy reference implementations of the hot kernels.

Selected automatically when the compiled extension is unavailable (or when
SAFEGRID_PURE=1).  Must stay result-identical to ``_fast``; the equivalence
is enforced by tests/test_kernels.py.
"""

import numpy as np

BACKEND = "python"


def conformal_pvalues(cal_sorted, tests):
    """Rank-based p-values of ``tests`` against an ascending calibration set.

    p = (1 + #{cal >= t}) / (1 + n), ties counted with >=.
    """
    cal_sorted = np.ascontiguousarray(cal_sorted, dtype=np.float64)
    tests = np.asarray(tests, dtype=np.float64)
    n = cal_sorted.shape[0]
    below = np.searchsorted(cal_sorted, tests, side="left")
    return (1.0 + (n - below)) / (n + 1.0)


def step_up_kstar(p_sorted, alpha, denom_scale):
    """Largest k with p_(k) <= k * alpha / (m * denom_scale), 1-based; 0 if none.

    ``denom_scale`` is 1 for the plain step-up procedure and the harmonic
    correction factor for its dependence-robust variant.
    """
    p_sorted = np.asarray(p_sorted, dtype=np.float64)
    m = p_sorted.shape[0]
    if m == 0:
        return 0
    thresholds = np.arange(1, m + 1, dtype=np.float64) * alpha / (m * denom_scale)
    hits = np.nonzero(p_sorted <= thresholds)[0]
    return 0 if hits.size == 0 else int(hits[-1]) + 1


def panel_reject_counts(pvals, is_null, alpha, denom_scale):
    """Per-row step-up rejection counts for a (T, m) p-value panel.

    Returns (false_rejections, total_rejections) as int64 arrays of length T,
    where a rejection is false when ``is_null`` marks the entry as a true null.
    """
    pvals = np.asarray(pvals, dtype=np.float64)
    is_null = np.asarray(is_null, dtype=np.uint8)
    t_steps, m = pvals.shape
    p_sorted = np.sort(pvals, axis=1)
    thresholds = np.arange(1, m + 1, dtype=np.float64) * alpha / (m * denom_scale)
    passed = p_sorted <= thresholds[None, :]
    # index of the largest passing order statistic per row, -1 if none
    kstar = np.where(passed.any(axis=1), m - 1 - np.argmax(passed[:, ::-1], axis=1), -1)
    false_counts = np.zeros(t_steps, dtype=np.int64)
    total_counts = np.zeros(t_steps, dtype=np.int64)
    rows = kstar >= 0
    if rows.any():
        cut = p_sorted[np.arange(t_steps), np.maximum(kstar, 0)]
        reject = rows[:, None] & (pvals <= cut[:, None])
        total_counts = reject.sum(axis=1).astype(np.int64)
        false_counts = (reject & (is_null != 0)).sum(axis=1).astype(np.int64)
    return false_counts, total_counts
