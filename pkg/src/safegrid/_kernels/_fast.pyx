# cython: language_level=3
"""Compiled hot kernels: conformal p-value ranking and step-up thresholding.

The pure-numpy reference lives in ``_ref.py``; both backends must return
bit-identical results.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


cdef Py_ssize_t _count_below(const double* cal, Py_ssize_t n, double value) noexcept nogil:
    # number of calibration scores strictly below ``value`` (bisect_left)
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) // 2
        if cal[mid] < value:
            lo = mid + 1
        else:
            hi = mid
    return lo


def conformal_pvalues(cal_sorted, tests):
    """Rank-based p-values of ``tests`` against an ascending calibration set.

    p = (1 + #{cal >= t}) / (1 + n), ties counted with >=.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cal = np.ascontiguousarray(
        cal_sorted, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ts = np.ascontiguousarray(
        np.asarray(tests, dtype=np.float64).ravel())
    cdef Py_ssize_t n = cal.shape[0]
    cdef Py_ssize_t k = ts.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t i
    cdef double denom = <double> (n + 1)
    for i in range(k):
        out[i] = (1.0 + <double> (n - _count_below(&cal[0], n, ts[i]))) / denom
    return out.reshape(np.asarray(tests, dtype=np.float64).shape)


cdef Py_ssize_t _kstar_sorted(const double* p, Py_ssize_t m, double alpha,
                              double denom_scale) noexcept nogil:
    cdef Py_ssize_t k
    cdef double slope = alpha / (<double> m * denom_scale)
    for k in range(m, 0, -1):
        if p[k - 1] <= <double> k * slope:
            return k
    return 0


def step_up_kstar(p_sorted, alpha, denom_scale):
    """Largest k with p_(k) <= k * alpha / (m * denom_scale), 1-based; 0 if none."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] p = np.ascontiguousarray(
        p_sorted, dtype=np.float64)
    cdef Py_ssize_t m = p.shape[0]
    if m == 0:
        return 0
    return int(_kstar_sorted(&p[0], m, alpha, denom_scale))


def panel_reject_counts(pvals, is_null, alpha, denom_scale):
    """Per-row step-up rejection counts for a (T, m) p-value panel.

    Rows are sorted via numpy (vectorized C sort); the step-up scan and the
    tie-respecting rejection counts run in nogil loops.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.ascontiguousarray(
        pvals, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] nulls = np.ascontiguousarray(
        is_null, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p_sorted = np.sort(p, axis=1)
    cdef Py_ssize_t t_steps = p.shape[0]
    cdef Py_ssize_t m = p.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] false_counts = np.zeros(t_steps, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] total_counts = np.zeros(t_steps, dtype=np.int64)
    cdef Py_ssize_t t, j, kstar
    cdef double cut, a = alpha, ds = denom_scale
    cdef long v_cnt, r_cnt
    with nogil:
        for t in range(t_steps):
            kstar = _kstar_sorted(&p_sorted[t, 0], m, a, ds)
            if kstar == 0:
                continue
            cut = p_sorted[t, kstar - 1]
            v_cnt = 0
            r_cnt = 0
            for j in range(m):
                if p[t, j] <= cut:
                    r_cnt += 1
                    if nulls[t, j] != 0:
                        v_cnt += 1
            false_counts[t] = v_cnt
            total_counts[t] = r_cnt
    return false_counts, total_counts
