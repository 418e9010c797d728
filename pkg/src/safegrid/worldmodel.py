"""Bootstrap ensemble of affine world models with a relative holdout error."""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MEMBERS = 5
DEFAULT_EPS_FLOOR = 0.1
RIDGE_LAMBDA = 1e-6


@dataclass(frozen=True)
class WorldModelEnsemble:
    """Affine members mapping [s, a, 1] -> s'; disagreement gives epistemic spread."""

    members: tuple = field(repr=False)  # each (state_dim, state_dim + action_dim + 1)
    state_dim: int
    action_dim: int
    seed: int
    epsilon_floor: float = DEFAULT_EPS_FLOOR

    @property
    def n_members(self):
        return len(self.members)

    def state_jacobians(self):
        """Per-member Jacobian blocks with respect to the state."""
        return [m[:, : self.state_dim] for m in self.members]

    def member_predict(self, states, actions):
        """Stacked member predictions, shape (M, ..., state_dim)."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        single = states.ndim == 1
        if single:
            states = states[None, :]
            actions = actions[None, :]
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ValueError("state/action dimensions do not match the ensemble")
        design = np.hstack([states, actions, np.ones((states.shape[0], 1))])
        preds = np.stack([design @ m.T for m in self.members])
        return preds[:, 0, :] if single else preds


def fit_world_ensemble(states, actions, next_states, n_members=DEFAULT_MEMBERS,
                       seed=0, ridge=RIDGE_LAMBDA, epsilon_floor=DEFAULT_EPS_FLOOR):
    """Least-squares affine fit per member on independent bootstrap resamples.

    A rank-deficient design falls back to a ridge solve with the documented
    lambda.  Deterministic given ``seed``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    n = states.shape[0]
    d_s, d_a = states.shape[1], actions.shape[1]
    p = d_s + d_a + 1
    if n < p:
        raise ValueError(f"need at least {p} transitions, got {n}")
    if actions.shape[0] != n or next_states.shape != (n, d_s):
        raise ValueError("transition arrays must align")
    rng = np.random.default_rng(seed)
    raw = np.hstack([states, actions])
    # standardized solve keeps the design well conditioned (the raw state mixes
    # unit scales); the solution is folded back into plain affine weights
    shift = raw.mean(axis=0)
    scale = np.maximum(raw.std(axis=0), 1e-9)
    design = np.hstack([(raw - shift) / scale, np.ones((n, 1))])
    members = []
    for _ in range(n_members):
        idx = rng.integers(0, n, size=n)
        x, y = design[idx], next_states[idx]
        coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
        if rank < p:
            coef = np.linalg.solve(x.T @ x + ridge * np.eye(p), x.T @ y)
        folded = np.vstack([coef[:-1] / scale[:, None],
                            coef[-1] - (shift / scale) @ coef[:-1]])
        members.append(folded.T)
    return WorldModelEnsemble(members=tuple(members), state_dim=d_s, action_dim=d_a,
                              seed=seed, epsilon_floor=epsilon_floor)


def ensemble_predict(ensemble, state, action):
    """Componentwise mean and spread of the member predictions.

    The spread is the population standard deviation across members (the
    1/M-normalized variance).
    """
    preds = ensemble.member_predict(state, action)
    mu = preds.mean(axis=0)
    sigma = np.sqrt(((preds - mu) ** 2).mean(axis=0))
    return mu, sigma


def model_error(ensemble, states, actions, next_states, epsilon_floor=None):
    """Mean relative next-state error ||s' - mu(s,a)|| / (||s'|| + floor)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("holdout set must be nonempty")
    floor = ensemble.epsilon_floor if epsilon_floor is None else epsilon_floor
    mu, _ = ensemble_predict(ensemble, states, actions)
    err = np.linalg.norm(next_states - mu, axis=1)
    denom = np.linalg.norm(next_states, axis=1) + floor
    return float(np.mean(err / denom))
