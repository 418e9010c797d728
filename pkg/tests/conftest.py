"""Shared fixtures: a toy linear environment for the safety-certificate tests."""

import numpy as np
import pytest

from safegrid.safety import LyapunovParams


class ToyLinearEnv:
    """Slowly contracting 2-D linear system with periodic demand kicks.

    s' = A s + B a + w, plus a deterministic pulse on the first coordinate
    every ``kick_every`` steps (alternating magnitudes).  The constraint is
    s[0] <= threshold; d_C = max(0, s[0] - threshold).
    """

    def __init__(self, seed=0, noise_sd=2e-4, kick_every=100,
                 kick_sizes=(0.35, 0.7), threshold=1.0, s0=(0.8, 0.4),
                 theta=0.03, contraction=0.99):
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        self.a_mat = contraction * rot
        self.b_mat = 0.08 * np.eye(2)
        self.noise_sd = noise_sd
        self.kick_every = kick_every
        self.kick_sizes = kick_sizes
        self.threshold = threshold
        self.rng = np.random.default_rng(seed)
        self.state = np.asarray(s0, dtype=np.float64)
        self.t = 0
        self._n_kicks = 0

    def violation(self, state):
        return max(0.0, float(np.asarray(state)[0]) - self.threshold)

    def step(self, action):
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt = self.a_mat @ self.state + self.b_mat @ action
        if self.noise_sd > 0:
            nxt = nxt + self.rng.normal(scale=self.noise_sd, size=2)
        self.t += 1
        if self.kick_every and self.t % self.kick_every == 0:
            nxt = nxt + np.array([self.kick_sizes[self._n_kicks % len(self.kick_sizes)], 0.0])
            self._n_kicks += 1
        self.state = nxt
        return nxt


@pytest.fixture
def toy_lyapunov():
    return LyapunovParams(feature_map=np.zeros((1, 2)), eta=1.0,
                          q_matrix=np.eye(2), s_safe=np.zeros(2))


def collect_toy_transitions(env_factory, n_steps, seed):
    """Random-action rollout of a toy env; returns (S, A, S')."""
    env = env_factory(seed)
    rng = np.random.default_rng(seed + 1)
    states, actions, nexts = [], [], []
    for _ in range(n_steps):
        a = rng.uniform(-1.0, 1.0, size=2)
        s = env.state.copy()
        s2 = env.step(a)
        states.append(s)
        actions.append(a)
        nexts.append(s2.copy())
    return np.array(states), np.array(actions), np.array(nexts)
