"""Heteroscedastic affine predictor fit by full-batch gradient descent.

Loss = mean[(y - mu)^2 / (2 sigma^2) + log sigma] + reg_lambda * mean[(log sigma)^2]
with mu and log sigma both affine in the inputs.  The (log sigma)^2 penalty
keeps the predicted spread from collapsing or exploding; a hard sigma floor
guards the degenerate zero-variance case.
"""

from dataclasses import dataclass, field

import numpy as np


class FitDivergenceError(RuntimeError):
    """Raised when the NLL becomes non-finite during fitting."""


@dataclass
class HetPredictor:
    """Affine mean and log-sigma heads over a flattened input window."""

    mean_weights: np.ndarray = field(repr=False)    # (p + 1, n_out), last row is the bias
    logsig_weights: np.ndarray = field(repr=False)  # (p + 1, n_out)
    reg_lambda: float = 1e-3
    sigma_floor: float = 1e-4

    def predict(self, inputs):
        """Return (mu, sigma) for inputs of shape (n, p) or (p,); sigma > 0 always."""
        x = np.asarray(inputs, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        design = np.hstack([x, np.ones((x.shape[0], 1))])
        mu = design @ self.mean_weights
        log_sigma = np.clip(design @ self.logsig_weights, np.log(self.sigma_floor), 30.0)
        sigma = np.exp(log_sigma)
        if single:
            return mu[0], sigma[0]
        return mu, sigma


def _het_loss_and_grads(design, y, w_mu, w_ls, reg_lambda, log_floor):
    with np.errstate(over="ignore", invalid="ignore"):
        mu = design @ w_mu
        raw = design @ w_ls
        s = np.clip(raw, log_floor, 30.0)
        sigma2 = np.exp(2.0 * s)
        resid = y - mu
        n_total = y.size
        loss = float(np.sum(resid**2 / (2.0 * sigma2) + s) / n_total
                     + reg_lambda * np.sum(s**2) / n_total)
        d_mu = -(resid / sigma2) / n_total
        d_s = (-(resid**2) / sigma2 + 1.0 + 2.0 * reg_lambda * s) / n_total
        d_s = np.where((raw > log_floor) & (raw < 30.0), d_s, 0.0)  # clipped: flat
        return loss, design.T @ d_mu, design.T @ d_s


def fit_heteroscedastic(inputs, targets, reg_lambda=1e-3, step_size=1e-2,
                        iterations=2000, min_samples=32, sigma_floor=1e-4,
                        checkpoint_every=100):
    """Fit the two affine heads; returns (HetPredictor, loss checkpoints).

    Gradient descent with analytic full-batch gradients; the step is halved
    whenever a step would increase the loss, so recorded checkpoints are
    non-increasing.  Raises FitDivergenceError if the loss leaves the floats.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n, p = x.shape
    if n < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {n}")
    if y.shape[0] != n or not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
        raise ValueError("inputs and targets must be finite and aligned")
    if reg_lambda < 0:
        raise ValueError("reg_lambda must be nonnegative")

    # standardize columns for conditioning; folded back into the weights below
    shift = x.mean(axis=0)
    scale = np.maximum(x.std(axis=0), 1e-12)
    design = np.hstack([(x - shift) / scale, np.ones((n, 1))])
    n_out = y.shape[1]
    w_mu = np.zeros((p + 1, n_out))
    w_ls = np.zeros((p + 1, n_out))
    log_floor = np.log(sigma_floor)

    step = step_size
    loss, g_mu, g_ls = _het_loss_and_grads(design, y, w_mu, w_ls, reg_lambda, log_floor)
    if not np.isfinite(loss):
        raise FitDivergenceError(f"initial loss is not finite ({loss})")
    checkpoints = [loss]
    for it in range(1, iterations + 1):
        cand_mu = w_mu - step * g_mu
        cand_ls = w_ls - step * g_ls
        new_loss, new_g_mu, new_g_ls = _het_loss_and_grads(
            design, y, cand_mu, cand_ls, reg_lambda, log_floor)
        if not np.isfinite(new_loss):
            raise FitDivergenceError(
                f"loss diverged at iteration {it} (step {step:g}); rescale inputs "
                "or lower step_size")
        if new_loss > loss:
            step *= 0.5
            if step < 1e-12:
                break
            continue
        w_mu, w_ls, loss = cand_mu, cand_ls, new_loss
        g_mu, g_ls = new_g_mu, new_g_ls
        if it % checkpoint_every == 0:
            checkpoints.append(loss)
    checkpoints.append(loss)

    # fold the standardization into plain affine weights on raw inputs
    fold_mu = np.vstack([w_mu[:-1] / scale[:, None],
                         w_mu[-1] - (shift / scale) @ w_mu[:-1]])
    fold_ls = np.vstack([w_ls[:-1] / scale[:, None],
                         w_ls[-1] - (shift / scale) @ w_ls[:-1]])
    predictor = HetPredictor(mean_weights=fold_mu, logsig_weights=fold_ls,
                             reg_lambda=reg_lambda, sigma_floor=sigma_floor)
    return predictor, np.asarray(checkpoints)
