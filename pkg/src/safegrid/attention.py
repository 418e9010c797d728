"""Uncertainty-weighted graph attention with a monotone pairwise confidence bias.

The attention row over a neighborhood adds gamma * (sigma_i - sigma_j) to the
feature logits, so relative attention between two neighbors depends only on
their uncertainty gap (never on the source's own sigma), and a self-loop bias
modulates how much a node attends to itself.  The classic temperature-scaled
variant is provided for contrast: it rescales a whole row and therefore cannot
rank neighbors by confidence at all.
"""

import math
from dataclasses import dataclass, field

import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def _softmax(logits):
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class NodeState:
    """Embedding and strictly positive uncertainty of a single node."""

    embedding: np.ndarray = field(repr=False)
    uncertainty: float = 1.0

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64).ravel()
        if not np.all(np.isfinite(emb)):
            raise ValueError("embedding entries must be finite")
        if not self.uncertainty > 0:
            raise ValueError("uncertainty must be strictly positive")
        object.__setattr__(self, "embedding", emb)


def stack_node_states(states):
    """(features, sigmas) arrays from a sequence of NodeState."""
    feats = np.stack([s.embedding for s in states])
    sigmas = np.array([s.uncertainty for s in states])
    return feats, sigmas


@dataclass(frozen=True)
class AttentionParams:
    """Single attention head: projection W, score vector a, confidence bias.

    ``gamma_raw`` maps through Softplus, keeping the pairwise uncertainty gain
    nonnegative; ``self_loop_bias`` is added to the diagonal logit only.
    """

    weight: np.ndarray = field(repr=False)
    attn: np.ndarray = field(repr=False)
    gamma_raw: float = 0.0
    self_loop_bias: float = 0.0
    leaky_slope: float = 0.2

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weight, dtype=np.float64))
        a = np.asarray(self.attn, dtype=np.float64).ravel()
        if a.shape[0] != 2 * w.shape[0]:
            raise ValueError("attention vector must have length 2 * d_out")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
            raise ValueError("attention parameters must be finite")
        if not (math.isfinite(self.gamma_raw) and math.isfinite(self.self_loop_bias)):
            raise ValueError("scalar attention parameters must be finite")
        if self.leaky_slope <= 0:
            raise ValueError("leaky_slope must be positive")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "attn", a)

    @property
    def gamma(self):
        return float(softplus(self.gamma_raw))

    @property
    def out_dim(self):
        return self.weight.shape[0]


def leaky_relu(x, slope):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def attention_logits(h_i, h_j, params):
    """Raw pair score e_ij = LeakyReLU(a . [W h_i || W h_j])."""
    h_i = np.asarray(h_i, dtype=np.float64).ravel()
    h_j = np.asarray(h_j, dtype=np.float64).ravel()
    d_in = params.weight.shape[1]
    if h_i.shape[0] != d_in or h_j.shape[0] != d_in:
        raise ValueError(f"embeddings must have dimension {d_in}")
    z = np.concatenate([params.weight @ h_i, params.weight @ h_j])
    return float(leaky_relu(params.attn @ z, params.leaky_slope))


def pugat_attention(logits, sigmas, self_pos, params):
    """Attention row: softmax_j of e_ij + gamma*(sigma_i - sigma_j) + bias at j=i.

    ``logits`` and ``sigmas`` are aligned with the source node's neighborhood
    (self included); ``self_pos`` is the position of the self-loop in the row.
    """
    logits = np.asarray(logits, dtype=np.float64).ravel()
    sigmas = np.asarray(sigmas, dtype=np.float64).ravel()
    if logits.size == 0:
        raise ValueError("empty neighborhood")
    if logits.shape != sigmas.shape:
        raise ValueError("logits and sigmas must align")
    if np.any(sigmas <= 0):
        raise ValueError("uncertainties must be strictly positive")
    if not 0 <= self_pos < logits.size:
        raise ValueError("self_pos out of range")
    biased = logits + params.gamma * (sigmas[self_pos] - sigmas)
    biased[self_pos] += params.self_loop_bias
    return _softmax(biased)


def temp_scaled_attention(logits, sigma_i, beta):
    """Temperature-scaled row: softmax of e_ij / (1 + beta * sigma_i).

    Only the source uncertainty enters; any two rows computed from the same
    logits and sigma_i are identical regardless of neighbor uncertainties.
    """
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if logits.size == 0:
        raise ValueError("empty neighborhood")
    if sigma_i <= 0:
        raise ValueError("sigma_i must be strictly positive")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return _softmax(logits / (1.0 + beta * sigma_i))


def attention_ratio_closed_form(e_ij, e_ik, gamma, sigma_j, sigma_k):
    """Closed-form attention ratio alpha_ij / alpha_ik for non-self neighbors j, k.

    Equals exp((e_ij - e_ik) + gamma * (sigma_k - sigma_j)); increasing in
    sigma_k, decreasing in sigma_j, independent of the source uncertainty.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return math.exp((e_ij - e_ik) + gamma * (sigma_k - sigma_j))


_ACTIVATIONS = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class LayerParams:
    """One message-passing layer: attention head plus the sigma read-out."""

    attention: AttentionParams
    sigma_weight: np.ndarray = field(repr=False)
    sigma_bias: float = 0.0
    activation: str = "tanh"

    def __post_init__(self):
        w = np.asarray(self.sigma_weight, dtype=np.float64).ravel()
        if w.shape[0] != self.attention.out_dim:
            raise ValueError("sigma_weight must match the attention output dim")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "sigma_weight", w)


def layer_forward(features, sigmas, topology, layer):
    """One attention layer: new embeddings and strictly positive new sigmas.

    h'_i = act(sum_j alpha_ij W h_j) over the neighborhood of i;
    sigma'_i = Softplus(w_sigma . h'_i + b_sigma).
    """
    features = np.asarray(features, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64).ravel()
    params = layer.attention
    n = topology.node_count
    if features.shape[0] != n or sigmas.shape[0] != n:
        raise ValueError("features and sigmas must cover every node")
    if features.shape[1] != params.weight.shape[1]:
        raise ValueError("feature dimension does not match the projection")
    if np.any(sigmas <= 0):
        raise ValueError("input uncertainties must be strictly positive")

    projected = features @ params.weight.T
    a_src = params.attn[: params.out_dim]
    a_dst = params.attn[params.out_dim :]
    src_score = projected @ a_src
    dst_score = projected @ a_dst
    act = _ACTIVATIONS[layer.activation]

    h_new = np.empty((n, params.out_dim), dtype=np.float64)
    for i, nbrs in enumerate(topology.neighborhoods):
        row_logits = leaky_relu(src_score[i] + dst_score[nbrs], params.leaky_slope)
        self_pos = int(np.nonzero(nbrs == i)[0][0])
        alpha = pugat_attention(row_logits, sigmas[nbrs], self_pos, params)
        h_new[i] = act(alpha @ projected[nbrs])
    sig_new = softplus(h_new @ layer.sigma_weight + layer.sigma_bias)
    return h_new, sig_new
