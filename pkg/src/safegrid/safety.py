"""Lyapunov safety machinery: constraints, certified Lipschitz bounds, the
model-error threshold, safe-action checking/projection, exploration scaling,
and the anomaly-aware reward.

The Lyapunov function is L(s) = ||A s||^2 + eta * (s - s_safe)' Q (s - s_safe)
with A spectrally normalized at construction, which keeps the Lipschitz bound
over a bounded domain exactly computable.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from safegrid.worldmodel import ensemble_predict

DEFAULT_KAPPA = 0.5
DEFAULT_DELTA_SLACK = 0.05
DEFAULT_N_PROJ = 20
DEFAULT_PENALTY = 10.0
DEFAULT_PROJ_STEP = 0.05
FD_STEP_REL = 1e-4


@dataclass(frozen=True)
class ConstraintSpec:
    """Traffic safety thresholds: mean queue, max wait, throughput floor."""

    queue_max: float = 50.0            # vehicles
    wait_max: float = 120.0            # seconds
    throughput_frac: float = 0.8       # fraction of baseline
    baseline_throughput: float = 1.0

    def __post_init__(self):
        if min(self.queue_max, self.wait_max, self.throughput_frac,
               self.baseline_throughput) <= 0:
            raise ValueError("constraint thresholds must be positive")

    def violation(self, mean_queue, max_wait, mean_throughput):
        """d_C = hinge sum of the three constraint gaps (>= 0)."""
        return (max(0.0, mean_queue - self.queue_max)
                + max(0.0, max_wait - self.wait_max)
                + max(0.0, self.throughput_frac * self.baseline_throughput
                      - mean_throughput))


def constraint_violation(metrics, spec):
    """d_C for a (mean_queue, max_wait, mean_throughput) triple."""
    mean_queue, max_wait, mean_throughput = metrics
    if not all(map(math.isfinite, (mean_queue, max_wait, mean_throughput))):
        raise ValueError("metrics must be finite")
    return spec.violation(mean_queue, max_wait, mean_throughput)


def spectral_norm(matrix, max_iter=500, tol=1e-12, seed=0):
    """Largest singular value by power iteration on M'M."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if m.size == 0:
        raise ValueError("matrix must be nonempty")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = m.T @ (m @ v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        new_sigma = float(np.linalg.norm(m @ v))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
            return new_sigma
        sigma = new_sigma
    return sigma


@dataclass(frozen=True)
class LyapunovParams:
    """Quadratic-plus-feature Lyapunov function with certified structure.

    ``feature_map`` is rescaled to spectral norm <= 1 at construction; Q must
    be symmetric positive definite and eta nonnegative, so L >= 0 everywhere.
    """

    feature_map: np.ndarray = field(repr=False)
    eta: float
    q_matrix: np.ndarray = field(repr=False)
    s_safe: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.feature_map, dtype=np.float64))
        q = np.atleast_2d(np.asarray(self.q_matrix, dtype=np.float64))
        s_safe = np.asarray(self.s_safe, dtype=np.float64).ravel()
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if q.shape != (s_safe.size, s_safe.size) or not np.allclose(q, q.T):
            raise ValueError("Q must be symmetric and match the state dimension")
        if np.linalg.eigvalsh(q).min() <= 0:
            raise ValueError("Q must be positive definite")
        if a.shape[1] != s_safe.size:
            raise ValueError("feature map width must match the state dimension")
        norm = spectral_norm(a)
        if norm > 1.0:
            a = a / norm
        object.__setattr__(self, "feature_map", a)
        object.__setattr__(self, "q_matrix", q)
        object.__setattr__(self, "s_safe", s_safe)


def lyapunov_value(state, params):
    """L(s) = ||A s||^2 + eta * (s - s_safe)' Q (s - s_safe) >= 0."""
    s = np.asarray(state, dtype=np.float64)
    single = s.ndim == 1
    if single:
        s = s[None, :]
    if s.shape[1] != params.s_safe.size:
        raise ValueError("state dimension mismatch")
    feat = s @ params.feature_map.T
    diff = s - params.s_safe
    val = (feat**2).sum(axis=1) + params.eta * np.einsum("ni,ij,nj->n", diff,
                                                         params.q_matrix, diff)
    return float(val[0]) if single else val


def lipschitz_bounds(params, member_matrices, domain_radius):
    """(L_bar, J_bar): gradient bound of L over the ball of ``domain_radius``
    around s_safe, and the largest member state-Jacobian spectral norm.

    L_bar = 2 * sigma(A) * sup||A s|| + 2 * eta * sigma(Q) * R with
    sup||A s|| <= sigma(A) * (||s_safe|| + R); valid by the mean value theorem
    on the convex domain.
    """
    if not (domain_radius > 0 and math.isfinite(domain_radius)):
        raise ValueError("domain_radius must be positive and finite")
    sigma_a = spectral_norm(params.feature_map)
    feature_sup = sigma_a * (float(np.linalg.norm(params.s_safe)) + domain_radius)
    l_bar = 2.0 * sigma_a * feature_sup + 2.0 * params.eta * spectral_norm(
        params.q_matrix) * domain_radius
    j_bar = max(spectral_norm(m) for m in member_matrices)
    return float(l_bar), float(j_bar)


def epsilon_star(delta_slack, kappa, d_c_bar, l_bar, j_bar, state_norm=None):
    """Model-error threshold (delta + kappa * d_C) / (L_bar * (1 + J_bar)).

    ``state_norm`` additionally divides by the mean state norm (the appendix
    variant of the bound); None keeps the main formula.
    """
    if delta_slack < 0 or kappa < 0:
        raise ValueError("delta_slack and kappa must be nonnegative")
    if l_bar <= 0:
        raise ValueError("l_bar must be positive")
    value = (delta_slack + kappa * d_c_bar) / (l_bar * (1.0 + j_bar))
    if state_norm is not None:
        if state_norm <= 0:
            raise ValueError("state_norm must be positive")
        value /= state_norm
    return float(value)


def check_lyapunov_safe(state, action, ensemble, lyapunov, kappa, delta_slack,
                        violation, member_mean=False):
    """(is_safe, delta_L) for the decrease test dL <= -kappa * d_C + slack.

    The next-state expectation is taken at the ensemble mean prediction;
    ``member_mean=True`` averages L over the member predictions instead.
    """
    state = np.asarray(state, dtype=np.float64).ravel()
    action = np.asarray(action, dtype=np.float64).ravel()
    if member_mean:
        preds = ensemble.member_predict(state, action)
        next_l = float(np.mean(lyapunov_value(preds, lyapunov)))
    else:
        mu, _ = ensemble_predict(ensemble, state, action)
        next_l = lyapunov_value(mu, lyapunov)
    delta_l = next_l - lyapunov_value(state, lyapunov)
    return delta_l <= -kappa * violation + delta_slack, float(delta_l)


@dataclass(frozen=True)
class ProjectionResult:
    action: np.ndarray = field(repr=False)
    is_safe: bool
    delta_l: float
    projected: bool


def project_safe_action(state, action, ensemble, lyapunov, violation,
                        bounds, kappa=DEFAULT_KAPPA, delta_slack=DEFAULT_DELTA_SLACK,
                        n_steps=DEFAULT_N_PROJ, step_size=DEFAULT_PROJ_STEP,
                        penalty=DEFAULT_PENALTY, violation_fn=None,
                        member_mean=False):
    """Project an unsafe action by finite-difference descent on the predicted L.

    Safe actions return unchanged.  Otherwise ``n_steps`` iterations descend
    L(mu(s, a)) plus ``penalty`` times the predicted-state violation (when a
    ``violation_fn`` over states is supplied), clipping every iterate into
    ``bounds``.  The final iterate is returned with its safety check result,
    which may still be unsafe.
    """
    state = np.asarray(state, dtype=np.float64).ravel()
    a = np.asarray(action, dtype=np.float64).ravel().copy()
    lo = np.broadcast_to(np.asarray(bounds[0], dtype=np.float64), a.shape)
    hi = np.broadcast_to(np.asarray(bounds[1], dtype=np.float64), a.shape)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("action bounds must be finite")
    a = np.clip(a, lo, hi)
    safe, delta_l = check_lyapunov_safe(state, a, ensemble, lyapunov, kappa,
                                        delta_slack, violation, member_mean)
    if safe or n_steps == 0:
        return ProjectionResult(action=a, is_safe=safe, delta_l=delta_l,
                                projected=False)

    h = FD_STEP_REL * np.maximum(hi - lo, 1e-12)
    d = a.size

    def objective_batch(candidates):
        states = np.broadcast_to(state, (candidates.shape[0], state.size))
        preds = ensemble.member_predict(states, candidates)
        mu = preds.mean(axis=0)
        values = lyapunov_value(mu, lyapunov)
        if violation_fn is not None:
            values = values + penalty * np.array([violation_fn(m) for m in mu])
        return values

    for _ in range(n_steps):
        candidates = np.repeat(a[None, :], 2 * d, axis=0)
        idx = np.arange(d)
        candidates[idx, idx] += h
        candidates[d + idx, idx] -= h
        values = objective_batch(candidates)
        grad = (values[:d] - values[d:]) / (2.0 * h)
        # normalized step: bounded per-coordinate movement regardless of the
        # Lyapunov scale, so one projection can traverse the action box
        scale = np.abs(grad).max()
        if scale <= 0:
            break
        a = np.clip(a - step_size * grad / scale, lo, hi)
    safe, delta_l = check_lyapunov_safe(state, a, ensemble, lyapunov, kappa,
                                        delta_slack, violation, member_mean)
    return ProjectionResult(action=a, is_safe=safe, delta_l=delta_l, projected=True)


@dataclass(frozen=True)
class ExplorationParams:
    """Logistic gate over (mean forecast sigma, mean p-value, model spread)."""

    weights: np.ndarray = field(repr=False)
    bias: float = 0.0
    noise_scale: float = 0.5  # additive-noise variant magnitude

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.shape[0] != 3 or not np.all(np.isfinite(w)):
            raise ValueError("weights must be a finite 3-vector")
        object.__setattr__(self, "weights", w)


def exploration_prob(sigma_forecast, p_anomaly, sigma_model, params):
    """Sigmoid of the affine form over the three uncertainty summaries."""
    x = np.array([sigma_forecast, p_anomaly, sigma_model], dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("exploration inputs must be finite")
    z = float(params.weights @ x + params.bias)
    return 1.0 / (1.0 + math.exp(-z))


@dataclass(frozen=True)
class RewardWeights:
    """Anomaly-response weights plus the plain traffic-reward coefficients."""

    p_weight: float = 1.0
    sigma_weight: float = 0.5
    violation_weight: float = 1.0
    throughput_gain: float = 1.0
    queue_cost: float = 0.1
    wait_cost: float = 0.01

    def __post_init__(self):
        if min(self.p_weight, self.sigma_weight, self.violation_weight) < 0:
            raise ValueError("anomaly-response weights must be nonnegative")


def anomaly_reward(r_traffic, p_before, p_after, sigma_bar, d_c, weights):
    """r = r_traffic + w_p (p_after - p_before) - w_sigma sigma_bar - w_C d_C."""
    return (r_traffic + weights.p_weight * (p_after - p_before)
            - weights.sigma_weight * sigma_bar - weights.violation_weight * d_c)


def lyapunov_decrease_rate(l_values):
    """Fraction of strictly decreasing transitions along a Lyapunov trace."""
    l_values = np.asarray(l_values, dtype=np.float64).ravel()
    if l_values.size < 2:
        raise ValueError("need at least two Lyapunov values")
    return float(np.mean(l_values[1:] < l_values[:-1]))
