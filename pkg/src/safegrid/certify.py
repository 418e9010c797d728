"""Safety certificate assembly and the iterative verification loop.

The certificate compares the measured relative model error against the
threshold derived from the Lipschitz bounds; because the mean constraint
violation under the deployed policy enters that threshold, verification
iterates rollout -> measure -> recompute until the verdict stabilizes.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from safegrid.safety import epsilon_star

DEFAULT_MAX_ROUNDS = 3
D_C_INIT = 1.0


@dataclass(frozen=True)
class SafetyCertificate:
    """Verdict plus every quantity entering the threshold, with the round trace."""

    epsilon_model: float
    l_bar: float
    j_bar: float
    delta_slack: float
    kappa: float
    d_c_bar: float
    epsilon_threshold: float
    verdict: str  # pass | fail | undetermined
    history: tuple = field(repr=False, default=())
    epsilon_threshold_statenorm: float = None
    state_norm: float = None

    def __post_init__(self):
        expected = epsilon_star(self.delta_slack, self.kappa, self.d_c_bar,
                                self.l_bar, self.j_bar)
        if abs(expected - self.epsilon_threshold) > 1e-9 * max(1.0, expected):
            raise ValueError("stored threshold does not match its inputs")
        if self.verdict not in ("pass", "fail", "undetermined"):
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def to_json(self):
        doc = {
            "epsilon_model": self.epsilon_model,
            "l_bar": self.l_bar,
            "j_bar": self.j_bar,
            "delta_slack": self.delta_slack,
            "kappa": self.kappa,
            "d_c_bar": self.d_c_bar,
            "epsilon_threshold": self.epsilon_threshold,
            "epsilon_threshold_statenorm": self.epsilon_threshold_statenorm,
            "state_norm": self.state_norm,
            "verdict": self.verdict,
            "history": [dict(h) for h in self.history],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            epsilon_model=doc["epsilon_model"], l_bar=doc["l_bar"],
            j_bar=doc["j_bar"], delta_slack=doc["delta_slack"],
            kappa=doc["kappa"], d_c_bar=doc["d_c_bar"],
            epsilon_threshold=doc["epsilon_threshold"], verdict=doc["verdict"],
            history=tuple(doc["history"]),
            epsilon_threshold_statenorm=doc.get("epsilon_threshold_statenorm"),
            state_norm=doc.get("state_norm"),
        )


def iterative_certificate(rollout_fn, epsilon_model, l_bar, j_bar,
                          delta_slack, kappa, max_rounds=DEFAULT_MAX_ROUNDS,
                          d_c_init=D_C_INIT, state_norm=None):
    """Iterate rollout -> measured mean violation -> recomputed threshold.

    ``rollout_fn(round_index)`` runs the policy through the safety filter and
    returns the mean instantaneous violation (and optionally the mean state
    norm as a second element).  Round 0 evaluates the threshold at the
    ``d_c_init`` estimate; verification stops as soon as the verdict repeats
    across consecutive rounds, else after ``max_rounds`` rollouts the verdict
    is 'undetermined'.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    history = []
    d_c_bar = float(d_c_init)
    mean_norm = state_norm
    eps = epsilon_star(delta_slack, kappa, d_c_bar, l_bar, j_bar)
    verdict = epsilon_model < eps
    history.append({"round": 0, "d_c_bar": d_c_bar, "epsilon_threshold": eps,
                    "pass": bool(verdict)})
    stable = False
    for rnd in range(1, max_rounds + 1):
        out = rollout_fn(rnd)
        if isinstance(out, tuple):
            measured, mean_norm = float(out[0]), float(out[1])
        else:
            measured = float(out)
        prev_verdict = verdict
        d_c_bar = measured
        eps = epsilon_star(delta_slack, kappa, d_c_bar, l_bar, j_bar)
        verdict = epsilon_model < eps
        history.append({"round": rnd, "d_c_bar": d_c_bar, "epsilon_threshold": eps,
                        "pass": bool(verdict)})
        if verdict == prev_verdict:
            stable = True
            break
    final = ("pass" if verdict else "fail") if stable else "undetermined"
    eps_statenorm = None
    if mean_norm is not None:
        eps_statenorm = epsilon_star(delta_slack, kappa, d_c_bar, l_bar, j_bar,
                                     state_norm=mean_norm)
    return SafetyCertificate(
        epsilon_model=float(epsilon_model), l_bar=float(l_bar), j_bar=float(j_bar),
        delta_slack=float(delta_slack), kappa=float(kappa), d_c_bar=d_c_bar,
        epsilon_threshold=eps, verdict=final, history=tuple(history),
        epsilon_threshold_statenorm=eps_statenorm, state_norm=mean_norm,
    )
