"""Reference control policies and the Lyapunov safety filter wrapper.

Policies map an observation dict to a per-intersection green-split vector in
[0, 1]; the filter checks each proposed action against the Lyapunov decrease
condition and projects unsafe ones.
"""

import numpy as np

from safegrid.safety import (DEFAULT_DELTA_SLACK, DEFAULT_KAPPA, DEFAULT_N_PROJ,
                             DEFAULT_PENALTY, DEFAULT_PROJ_STEP, exploration_prob,
                             project_safe_action)


class RandomPolicy:
    """Uniform green splits; a deliberately uninformed baseline."""

    def __init__(self, n_actions, low=0.0, high=1.0):
        self.n_actions = n_actions
        self.low = low
        self.high = high

    def act(self, obs, rng):
        return rng.uniform(self.low, self.high, size=self.n_actions)


class GreedyPressurePolicy:
    """Green split rises with the local queue: g_i = q_i / (q_i + q_ref)."""

    def __init__(self, n_actions, queue_ref=10.0):
        if queue_ref <= 0:
            raise ValueError("queue_ref must be positive")
        self.n_actions = n_actions
        self.queue_ref = queue_ref

    def act(self, obs, rng):
        queues = np.asarray(obs["queues"], dtype=np.float64)
        return queues / (queues + self.queue_ref)


class SafetyFilter:
    """Wraps a policy with the decrease check, projection, and exploration gate.

    ``exploration`` modes: None, 'sigmoid_gate' (with probability given by the
    logistic form, replace the action with a uniform draw before filtering) or
    'scaled_noise' (additive Gaussian noise scaled by the mean forecast sigma).
    """

    def __init__(self, policy, ensemble, lyapunov, violation_fn, bounds,
                 kappa=DEFAULT_KAPPA, delta_slack=DEFAULT_DELTA_SLACK,
                 n_proj=DEFAULT_N_PROJ, proj_step=DEFAULT_PROJ_STEP,
                 penalty=DEFAULT_PENALTY, enabled=True,
                 exploration=None, exploration_params=None):
        self.policy = policy
        self.ensemble = ensemble
        self.lyapunov = lyapunov
        self.violation_fn = violation_fn
        self.bounds = bounds
        self.kappa = kappa
        self.delta_slack = delta_slack
        self.n_proj = n_proj
        self.proj_step = proj_step
        self.penalty = penalty
        self.enabled = enabled
        self.exploration = exploration
        self.exploration_params = exploration_params

    def _explore(self, action, obs, rng):
        params = self.exploration_params
        if self.exploration is None or params is None:
            return action
        sig_f = float(obs.get("sigma_forecast", 0.0))
        p_bar = float(obs.get("p_anomaly", 1.0))
        sig_w = float(obs.get("sigma_model", 0.0))
        if self.exploration == "sigmoid_gate":
            # with the gated probability, perturb uniformly inside the box
            eps = exploration_prob(sig_f, p_bar, sig_w, params)
            if rng.uniform() < eps:
                lo, hi = self.bounds
                kick = rng.uniform(-1.0, 1.0, size=action.shape)
                return action + 0.25 * (hi - lo) * kick
            return action
        if self.exploration == "scaled_noise":
            noise = params.noise_scale * sig_f * rng.standard_normal(action.shape)
            return action + noise
        raise ValueError(f"unknown exploration mode {self.exploration!r}")

    def act(self, state_vector, obs, rng):
        """Return (action, ProjectionResult-or-None) for the current state."""
        action = np.asarray(self.policy.act(obs, rng), dtype=np.float64)
        action = self._explore(action, obs, rng)
        lo, hi = self.bounds
        action = np.clip(action, lo, hi)
        if not self.enabled:
            return action, None
        result = project_safe_action(
            state_vector, action, self.ensemble, self.lyapunov,
            violation=self.violation_fn(state_vector), bounds=self.bounds,
            kappa=self.kappa, delta_slack=self.delta_slack, n_steps=self.n_proj,
            step_size=self.proj_step, penalty=self.penalty,
            violation_fn=self.violation_fn)
        return result.action, result
