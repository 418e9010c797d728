"""Grid-cell to intersection aggregation and control-state assembly.

Cells and intersection coverage areas are axis-aligned rectangles in km; the
coverage weights are exact intersection-area fractions, so every aggregate is
a convex combination of cell values.  Variance aggregation supports three
covariance models: diagonal, an exponential distance kernel, and an empirical
residual covariance (cut off beyond a distance and projected to PSD).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

STATE_LAYOUT_VERSION = 1

# Fixed concatenation order of the assembled control state:
#   [local (n_int x n_local, row-major), mu_int, sigma_int, p_int, flags, clock]


def rect_area(rect):
    x0, y0, x1, y1 = rect
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def rect_intersection_area(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    w = min(ax1, bx1) - max(ax0, bx0)
    h = min(ay1, by1) - max(ay0, by0)
    return max(0.0, w) * max(0.0, h)


@dataclass(frozen=True)
class CoverageMap:
    """Intersection-by-cell area-fraction weights; rows sum to one."""

    weights: np.ndarray = field(repr=False)
    cell_rects: tuple = field(repr=False)
    intersection_rects: tuple = field(repr=False)

    @property
    def n_intersections(self):
        return self.weights.shape[0]

    @property
    def n_cells(self):
        return self.weights.shape[1]

    def to_json(self):
        return json.dumps({
            "weights": self.weights.tolist(),
            "cell_rects": [list(r) for r in self.cell_rects],
            "intersection_rects": [list(r) for r in self.intersection_rects],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(weights=np.asarray(doc["weights"], dtype=np.float64),
                   cell_rects=tuple(tuple(r) for r in doc["cell_rects"]),
                   intersection_rects=tuple(tuple(r) for r in doc["intersection_rects"]))


def coverage_weights(cell_rects, intersection_rects, tol=1e-6):
    """Exact area-fraction weights w[j, i] = |cell_i ∩ A_j| / |A_j|.

    Rejects any coverage area with zero area or one not fully tiled by cells.
    """
    weights = np.zeros((len(intersection_rects), len(cell_rects)))
    for j, area_rect in enumerate(intersection_rects):
        a = rect_area(area_rect)
        if a <= 0:
            raise ValueError(f"intersection {j} has nonpositive area")
        for i, cell in enumerate(cell_rects):
            weights[j, i] = rect_intersection_area(cell, area_rect) / a
        total = weights[j].sum()
        if abs(total - 1.0) > tol:
            raise ValueError(
                f"cells cover {total:.6f} of intersection {j}'s area (expected 1)")
    return CoverageMap(weights=weights, cell_rects=tuple(tuple(r) for r in cell_rects),
                       intersection_rects=tuple(tuple(r) for r in intersection_rects))


def aggregate_mean(mu, cmap):
    """Weighted cell means per intersection (a convex combination)."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape[-1] != cmap.n_cells:
        raise ValueError("mu length must equal the cell count")
    return mu @ cmap.weights.T


@dataclass(frozen=True)
class CovarianceModel:
    """Cell-forecast covariance: 'diagonal', 'distance_kernel', or 'empirical'.

    The kernel correlation exp(-d / length_scale) is PSD on any point set; the
    distance cutoff applies to the empirical matrix (entries zeroed beyond it,
    then projected back to PSD).
    """

    kind: str = "distance_kernel"
    length_scale: float = 2.0
    cutoff: float = 10.0
    matrix: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.kind not in ("diagonal", "distance_kernel", "empirical"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.kind == "distance_kernel" and self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.kind == "empirical" and self.matrix is None:
            raise ValueError("empirical model requires a matrix")

    def correlation(self, coords):
        n = coords.shape[0]
        if self.kind == "diagonal":
            return np.eye(n)
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        return np.exp(-dist / self.length_scale)


def aggregate_variance(sigma, cmap, model, coords=None):
    """Per-intersection sigma from the quadratic form over the cell covariance.

    sigma_int_j = sqrt(max(sum_ik w_ij w_kj Cov_ik, 0)); Cov_ik is
    rho_ik * sigma_i * sigma_k for the diagonal/kernel models and the stored
    matrix for the empirical model.
    """
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    if sigma.shape[0] != cmap.n_cells:
        raise ValueError("sigma length must equal the cell count")
    if model.kind == "empirical":
        cov = np.asarray(model.matrix, dtype=np.float64)
        if cov.shape != (cmap.n_cells, cmap.n_cells):
            raise ValueError("empirical covariance shape mismatch")
    else:
        if coords is None:
            raise ValueError("coords required for the distance-based models")
        coords = np.asarray(coords, dtype=np.float64)
        rho = model.correlation(coords)
        cov = rho * np.outer(sigma, sigma)
    form = np.einsum("ji,ik,jk->j", cmap.weights, cov, cmap.weights)
    return np.sqrt(np.maximum(form, 0.0))


def empirical_residual_cov(residual_panel, coords, cutoff=10.0):
    """Sample covariance (n-1 normalization) of validation residuals, sparsified.

    Pairs farther apart than ``cutoff`` km are zeroed; the matrix is then
    symmetrized and negative eigenvalues are clipped so it stays PSD.
    """
    r = np.asarray(residual_panel, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 2:
        raise ValueError("need a (time, nodes) panel with at least 2 samples")
    cov = np.cov(r, rowvar=False)
    cov = np.atleast_2d(cov)
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    cov = np.where(dist > cutoff, 0.0, cov)
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < 0:
        cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        cov = 0.5 * (cov + cov.T)
    return cov


def aggregate_pvalues(p, cmap, rule="min"):
    """Combine covered cells' p-values per intersection.

    'min' (default) propagates the most alarming covered cell; 'geometric'
    takes the weight-averaged geometric mean.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("p-values must lie in (0, 1]")
    if p.shape[0] != cmap.n_cells:
        raise ValueError("p length must equal the cell count")
    covered = cmap.weights > 0
    if rule == "min":
        masked = np.where(covered, p[None, :], np.inf)
        return masked.min(axis=1)
    if rule == "geometric":
        logp = np.log(p)
        return np.exp((cmap.weights @ logp) / cmap.weights.sum(axis=1))
    raise ValueError(f"unknown aggregation rule {rule!r}")


def cyclic_clock(step, steps_per_day, days_per_week=7):
    """(sin, cos) pairs for time-of-day and day-of-week phases."""
    tod = 2.0 * math.pi * (step % steps_per_day) / steps_per_day
    dow = 2.0 * math.pi * ((step // steps_per_day) % days_per_week) / days_per_week
    return np.array([math.sin(tod), math.cos(tod), math.sin(dow), math.cos(dow)])


@dataclass(frozen=True)
class ControlState:
    """Assembled control state; ``vector`` is the documented concatenation."""

    local: np.ndarray = field(repr=False)
    mu_int: np.ndarray = field(repr=False)
    sigma_int: np.ndarray = field(repr=False)
    p_int: np.ndarray = field(repr=False)
    flags: np.ndarray = field(repr=False)
    clock: np.ndarray = field(repr=False)
    layout_version: int = STATE_LAYOUT_VERSION

    @property
    def vector(self):
        return np.concatenate([
            self.local.ravel(), self.mu_int, self.sigma_int,
            self.p_int, self.flags.astype(np.float64), self.clock,
        ])


def assemble_state(local, mu_int, sigma_int, p_int, flags, clock):
    """Validate components and fix the concatenation order (layout v1)."""
    local = np.asarray(local, dtype=np.float64)
    mu_int = np.asarray(mu_int, dtype=np.float64).ravel()
    sigma_int = np.asarray(sigma_int, dtype=np.float64).ravel()
    p_int = np.asarray(p_int, dtype=np.float64).ravel()
    flags = np.asarray(flags).ravel()
    clock = np.asarray(clock, dtype=np.float64).ravel()
    n = mu_int.shape[0]
    if local.ndim == 2 and local.shape[0] != n:
        raise ValueError("local block must have one row per intersection")
    if not (sigma_int.shape[0] == p_int.shape[0] == flags.shape[0] == n):
        raise ValueError("per-intersection components must align")
    if clock.shape[0] != 4:
        raise ValueError("clock must be the 4 cyclic components")
    if np.any(sigma_int < 0):
        raise ValueError("sigma_int must be nonnegative")
    # conformal p-values are bounded below by 1/(n'+1); assembly itself only
    # rejects values outside [0, 1] so zero-filled states remain constructible
    if np.any((p_int < 0) | (p_int > 1)):
        raise ValueError("p_int must lie in [0, 1]")
    if not np.all(np.isin(flags, (0, 1))):
        raise ValueError("flags must be binary")
    return ControlState(local=local, mu_int=mu_int, sigma_int=sigma_int,
                        p_int=p_int, flags=flags.astype(np.int64), clock=clock)
