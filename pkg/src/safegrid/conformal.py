"""Spatially-clustered split conformal intervals with online level adaptation.

Nodes are grouped by k-means on their error statistics (mean, std, skew of
absolute validation residuals); each cluster keeps its own sorted conformity
scores, finite-sample-corrected quantile, and an adaptively updated working
miscoverage level.  The whole ledger serializes to JSON and round-trips
byte-identically.
"""

import json
from dataclasses import dataclass, field

import numpy as np

ALPHA_MIN = 0.001
ALPHA_MAX = 0.999


@dataclass(frozen=True)
class ClusterAssignment:
    """k-means partition of nodes over (mean, std, skew) error statistics."""

    k: int
    labels: np.ndarray = field(repr=False)
    centroids: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.k <= 0:
            raise ValueError("k must be positive")
        counts = np.bincount(labels, minlength=self.k)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= self.k:
            raise ValueError("labels out of range")
        if np.any(counts == 0):
            raise ValueError("every cluster must be non-empty")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "centroids", centroids)


def error_statistics(residual_panel):
    """Per-node (mean, std, skew) of absolute residuals; skew of a constant is 0."""
    r = np.abs(np.asarray(residual_panel, dtype=np.float64))
    if r.ndim != 2:
        raise ValueError("residual panel must be 2-D (time, nodes)")
    mean = r.mean(axis=0)
    std = r.std(axis=0)
    centered = r - mean
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = np.where(std > 0, (centered**3).mean(axis=0) / np.where(std > 0, std, 1.0) ** 3, 0.0)
    return np.column_stack([mean, std, skew])


def cluster_nodes(statistics, k, seed, max_iter=100):
    """Deterministic seeded k-means; empty clusters repaired from the largest.

    Repair moves the member farthest from the largest cluster's centroid into
    the empty cluster, so every cluster ends non-empty.
    """
    stats_arr = np.asarray(statistics, dtype=np.float64)
    if stats_arr.ndim != 2:
        raise ValueError("statistics must be 2-D (nodes, features)")
    n = stats_arr.shape[0]
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds node count {n}")
    if not np.all(np.isfinite(stats_arr)):
        raise ValueError("statistics must be finite")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, stats_arr.shape[1]))
    centroids[0] = stats_arr[rng.integers(n)]
    dist2 = ((stats_arr - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = dist2.sum()
        if total <= 0:
            centroids[j] = stats_arr[rng.integers(n)]
        else:
            centroids[j] = stats_arr[rng.choice(n, p=dist2 / total)]
        dist2 = np.minimum(dist2, ((stats_arr - centroids[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((stats_arr[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for j in range(k):
            members = new_labels == j
            if not members.any():
                counts = np.bincount(new_labels, minlength=k)
                big = int(counts.argmax())
                big_members = np.nonzero(new_labels == big)[0]
                far = big_members[d2[big_members, big].argmax()]
                new_labels[far] = j
                centroids[j] = stats_arr[far]
            else:
                centroids[j] = stats_arr[members].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterAssignment(k=k, labels=labels, centroids=centroids)


def conformity_scores(y, mu, sigma):
    """Absolute standardized residuals |y - mu| / sigma."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return np.abs(y - mu) / sigma


def cluster_quantile(scores, alpha):
    """Finite-sample conformal quantile: the ceil((1-alpha)(n+1))-th smallest score.

    Returns +inf when the corrected index exceeds n (the interval must cover
    the whole line to guarantee the level at this sample size).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.shape[0]
    if n == 0:
        raise ValueError("empty score set")
    idx = int(np.ceil((1.0 - alpha) * (n + 1)))
    if idx > n:
        return float("inf")
    return float(np.sort(scores)[idx - 1])


@dataclass(frozen=True)
class ForecastBundle:
    """Point forecasts and spreads with the cluster tag of each node."""

    mu: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    clusters: np.ndarray = field(repr=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        clusters = np.asarray(self.clusters, dtype=np.int64)
        if mu.shape != sigma.shape or mu.shape[-1] != clusters.shape[0]:
            raise ValueError("mu/sigma shapes must match, last axis = nodes")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "clusters", clusters)


@dataclass(frozen=True)
class PredictionIntervalSet:
    """Elementwise [lower, upper] bounds; unbounded entries are flagged."""

    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    level: float = 0.9
    unbounded: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        if lower.shape != upper.shape:
            raise ValueError("bound shapes must match")
        finite = np.isfinite(lower) & np.isfinite(upper)
        if np.any(lower[finite] > upper[finite]):
            raise ValueError("lower bound exceeds upper bound")
        unbounded = self.unbounded
        if unbounded is None:
            unbounded = ~finite
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "unbounded", np.asarray(unbounded, dtype=bool))


class CalibrationLedger:
    """Per-cluster conformity scores, quantiles, and working miscoverage levels.

    Single-writer semantics: ``record_errors`` mutates the working levels; all
    read paths (quantiles, intervals) are pure.
    """

    def __init__(self, clusters, scores_by_cluster, target_alpha=0.1,
                 aci_step=0.05, gap_steps=24, alpha_t=None, aci_variant="main"):
        if not 0 < target_alpha < 1:
            raise ValueError("target_alpha must lie in (0, 1)")
        if gap_steps < 0:
            raise ValueError("gap_steps must be nonnegative")
        self.clusters = clusters
        self.scores = []
        for k in range(clusters.k):
            s = np.sort(np.asarray(scores_by_cluster[k], dtype=np.float64).ravel())
            if s.size == 0:
                raise ValueError(f"cluster {k} has no calibration scores")
            if np.any(s < 0):
                raise ValueError("conformity scores must be nonnegative")
            self.scores.append(s)
        self.target_alpha = float(target_alpha)
        self.aci_step = float(aci_step)
        self.gap_steps = int(gap_steps)
        self.aci_variant = aci_variant
        if alpha_t is None:
            alpha_t = np.full(clusters.k, target_alpha)
        self.alpha_t = np.clip(np.asarray(alpha_t, dtype=np.float64), ALPHA_MIN, ALPHA_MAX)

    @classmethod
    def from_calibration(cls, clusters, y, mu, sigma, **kwargs):
        """Build from calibration panels shaped (time, nodes)."""
        scores = conformity_scores(y, mu, sigma)
        by_cluster = [scores[:, clusters.labels == k].ravel() for k in range(clusters.k)]
        return cls(clusters, by_cluster, **kwargs)

    def clone(self):
        """Independent copy; score arrays are shared (treated immutable)."""
        return CalibrationLedger(self.clusters, self.scores,
                                 target_alpha=self.target_alpha,
                                 aci_step=self.aci_step, gap_steps=self.gap_steps,
                                 alpha_t=self.alpha_t.copy(),
                                 aci_variant=self.aci_variant)

    def quantile(self, k, alpha=None):
        a = self.alpha_t[k] if alpha is None else alpha
        return cluster_quantile(self.scores[k], a)

    def quantiles(self):
        return np.array([self.quantile(k) for k in range(self.clusters.k)])

    def record_errors(self, err_by_cluster):
        """Apply one adaptive update per cluster; err entries are 0/1 or NaN to skip."""
        for k, err in enumerate(np.asarray(err_by_cluster, dtype=np.float64)):
            if np.isnan(err):
                continue
            self.alpha_t[k] = aci_update(self.alpha_t[k], err, self.aci_step,
                                         self.target_alpha, variant=self.aci_variant)

    def to_json(self):
        doc = {
            "target_alpha": self.target_alpha,
            "aci_step": self.aci_step,
            "gap_steps": self.gap_steps,
            "aci_variant": self.aci_variant,
            "k": self.clusters.k,
            "labels": self.clusters.labels.tolist(),
            "centroids": self.clusters.centroids.tolist(),
            "scores": [s.tolist() for s in self.scores],
            "alpha_t": self.alpha_t.tolist(),
            "quantiles": [q if np.isfinite(q) else None for q in self.quantiles()],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        clusters = ClusterAssignment(
            k=doc["k"],
            labels=np.asarray(doc["labels"], dtype=np.int64),
            centroids=np.asarray(doc["centroids"], dtype=np.float64),
        )
        return cls(clusters, [np.asarray(s) for s in doc["scores"]],
                   target_alpha=doc["target_alpha"], aci_step=doc["aci_step"],
                   gap_steps=doc["gap_steps"], alpha_t=np.asarray(doc["alpha_t"]),
                   aci_variant=doc.get("aci_variant", "main"))


def build_intervals(bundle, ledger):
    """Per-node intervals mu +/- q_k * sigma at each node's working level."""
    labels = bundle.clusters
    if labels.max(initial=0) >= ledger.clusters.k or labels.min(initial=0) < 0:
        raise ValueError("bundle references a cluster missing from the ledger")
    q = ledger.quantiles()[labels]
    lower = bundle.mu - q * bundle.sigma
    upper = bundle.mu + q * bundle.sigma
    unbounded = np.broadcast_to(~np.isfinite(q), bundle.mu.shape).copy()
    level = 1.0 - ledger.target_alpha
    return PredictionIntervalSet(lower=lower, upper=upper, level=level, unbounded=unbounded)


def aci_update(alpha_t, err, gamma, target_alpha, variant="main",
               clamp=(ALPHA_MIN, ALPHA_MAX)):
    """One adaptive-level step: a miss (err=1) lowers alpha, widening intervals.

    ``variant='appendix'`` flips the sign convention (err - target) for
    comparison; the main convention is the tracking one.
    """
    if not 0 < alpha_t < 1:
        raise ValueError("alpha_t must lie in (0, 1)")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    if variant == "main":
        new = alpha_t + gamma * (target_alpha - err)
    elif variant == "appendix":
        new = alpha_t + gamma * (err - target_alpha)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return float(np.clip(new, clamp[0], clamp[1]))


@dataclass(frozen=True)
class CoverageReport:
    coverage: float
    riw: float
    efficiency: float


def evaluate_coverage(intervals, y, data_range):
    """Coverage, mean relative interval width, and their ratio.

    coverage = fraction of y inside [L, U]; RIW = mean (U - L) / data_range;
    efficiency = coverage / RIW.  Degenerate inputs (zero range or zero RIW
    with misses) are rejected rather than reported as infinities.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != intervals.lower.shape:
        raise ValueError("interval and truth shapes must match")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    inside = (y >= intervals.lower) & (y <= intervals.upper)
    coverage = float(inside.mean())
    riw = float(np.mean((intervals.upper - intervals.lower)) / data_range)
    if riw == 0.0 and coverage < 1.0:
        raise ValueError("efficiency undefined: degenerate intervals with misses")
    efficiency = coverage / riw if riw > 0 else float("inf")
    return CoverageReport(coverage=coverage, riw=riw, efficiency=efficiency)
