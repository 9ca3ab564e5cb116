"""Linear-subspace imputation: ``y_O = W_O x + mu_O + noise`` with a unit Gaussian prior on x.

All closed-form routines work in float64 on flattened images and accept either
one sample of shape (D,) or a batch (N, D); image batches (N, H, W) are
flattened transparently.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DecompositionError, DivergenceError
from .layers import DEFAULT_RIDGE
from .model import batches

log = logging.getLogger(__name__)

PARAM_NAMES = ("linear.W", "linear.mu", "linear.sigma2")


@dataclass
class LinearModel:
    W: np.ndarray
    mu: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma2 = float(self.sigma2)
        if self.W.ndim != 2 or self.mu.shape != (self.W.shape[0],):
            raise ValueError(f"W {self.W.shape} and mu {self.mu.shape} are inconsistent")
        if self.W.shape[1] > self.W.shape[0]:
            raise ValueError("latent size exceeds data dimension")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def dims(self):
        return self.W.shape

    def state_dict(self):
        return {"linear.W": self.W.astype(np.float32), "linear.mu": self.mu.astype(np.float32),
                "linear.sigma2": np.array([self.sigma2], dtype=np.float32)}

    @classmethod
    def from_state_dict(cls, state):
        return cls(state["linear.W"], state["linear.mu"], float(state["linear.sigma2"][0]))

    def copy(self):
        return LinearModel(self.W.copy(), self.mu.copy(), self.sigma2)


def _flat(values, mask):
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    single = values.ndim == 1
    shape = values.shape
    if single:
        values, mask = values[None], mask[None]
    values = values.reshape(len(values), -1)
    mask = mask.reshape(len(mask), -1)
    return values * mask, mask, single, shape


def observed_pixel_mean(values, mask):
    """Per-pixel mean over observed entries; never-observed pixels get the global observed mean."""
    values, mask, _, _ = _flat(values, mask)
    counts = mask.sum(axis=0)
    total = values.sum(axis=0)
    fallback = total.sum() / max(counts.sum(), 1.0)
    return np.divide(total, counts, out=np.full(total.shape, fallback), where=counts > 0)


def pca_init(values, mask, d, sigma2=0.1):
    """Principal directions of the mean-filled data, scaled by singular value / sqrt(N)."""
    mean = observed_pixel_mean(values, mask)
    values, mask, _, _ = _flat(values, mask)
    n, D = values.shape
    if d > D or d > n:
        raise ValueError(f"d={d} too large for {n} samples of dimension {D}")
    filled = np.where(mask > 0, values, mean) - mean
    _, s, vt = np.linalg.svd(filled, full_matrices=False)
    return LinearModel(vt[:d].T * (s[:d] / math.sqrt(n)), mean, sigma2)


def _normal_matrix(W, mask, reg):
    gram = np.einsum("nD,Dk,Dl->nkl", mask, W, W, optimize=True)
    return gram + reg * np.eye(W.shape[1])


def _chol(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise DecompositionError("normal matrix is not positive definite after regularization") from None


def linear_posterior(model, values, mask, reg=DEFAULT_RIDGE):
    """Mean and full covariance of the subspace posterior given observed pixels.

    mean = (W_O^T W_O + reg I)^-1 W_O^T (y_O - mu_O), cov = sigma2 (W_O^T W_O + reg I)^-1.
    With ``reg = sigma2`` this is the exact Bayesian posterior of the linear
    model; the default small ridge gives the pseudo-inverse projection.
    """
    values, mask, single, _ = _flat(values, mask)
    a = _normal_matrix(model.W, mask, reg)
    chol = _chol(a)
    rhs = ((values - model.mu) * mask) @ model.W
    inv = np.linalg.solve(np.swapaxes(chol, -1, -2), np.linalg.solve(chol, np.broadcast_to(np.eye(a.shape[-1]), a.shape)))
    mean = np.einsum("nkl,nl->nk", inv, rhs)
    cov = model.sigma2 * inv
    return (mean[0], cov[0]) if single else (mean, cov)


def impute_linear(model, values, mask):
    """Conditional-mean image ``W (W_O^T W_O + sigma2 I)^-1 W_O^T (y_O - mu_O) + mu``."""
    flat_values, flat_mask, _, shape = _flat(values, mask)
    mean, _ = linear_posterior(model, flat_values, flat_mask, reg=model.sigma2)
    out = mean @ model.W.T + model.mu
    return out.reshape(shape)


def observed_loglik(model, values, mask):
    """Total log-likelihood of the observed entries, ``y_O ~ N(mu_O, W_O W_O^T + sigma2 I)``."""
    values, mask, _, _ = _flat(values, mask)
    s2 = model.sigma2
    m = _normal_matrix(model.W, mask, s2)
    chol = _chol(m)
    resid = (values - model.mu) * mask
    n_obs = mask.sum(axis=1)
    proj = np.linalg.solve(chol, (resid @ model.W)[..., None])[..., 0]
    quad = (np.sum(resid ** 2, axis=1) - np.sum(proj ** 2, axis=1)) / s2
    logdet_m = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    d = model.W.shape[1]
    logdet_c = logdet_m + (n_obs - d) * math.log(s2)
    return float(np.sum(-0.5 * (n_obs * math.log(2 * math.pi) + logdet_c + quad)))


# ---------------------------------------------------------------- EM


def em_step(model, values, mask, min_sigma2=1e-8):
    """One expectation-maximization update of ``W``, ``mu`` and ``sigma2``.

    W and mu are solved jointly per pixel from expected sufficient statistics
    over the samples that observe that pixel; sigma2 is then the mean expected
    squared residual over all observed entries.
    """
    values, mask, _, _ = _flat(values, mask)
    n = len(values)
    d = model.W.shape[1]
    ex, cov = linear_posterior(model, values, mask, reg=model.sigma2)
    ex_aug = np.concatenate([ex, np.ones((n, 1))], axis=1)
    exx_aug = np.empty((n, d + 1, d + 1))
    exx_aug[:, :d, :d] = cov + ex[:, :, None] * ex[:, None, :]
    exx_aug[:, :d, d] = ex
    exx_aug[:, d, :d] = ex
    exx_aug[:, d, d] = 1.0

    stats = np.einsum("nD,nkl->Dkl", mask, exx_aug, optimize=True)
    target = np.einsum("nD,nk->Dk", values * mask, ex_aug, optimize=True)
    counts = mask.sum(axis=0)
    singular = counts < 1
    try:
        np.linalg.cholesky(stats[~singular])
    except np.linalg.LinAlgError:
        singular = singular | (np.linalg.matrix_rank(stats, hermitian=True) < d + 1)
    if singular.any():
        warnings.warn(f"EM M-step: {int(singular.sum())} pixel(s) have a singular normal matrix; "
                      "adding ridge 1e-6", RuntimeWarning, stacklevel=2)
        stats[singular] += 1e-6 * np.eye(d + 1)
    w_aug = np.linalg.solve(stats, target[..., None])[..., 0]

    sq = np.sum((values ** 2) * mask)
    cross = np.sum(w_aug * target)
    quad = np.einsum("Dk,Dkl,Dl->", w_aug, stats, w_aug)
    sigma2 = max((sq - 2 * cross + quad) / mask.sum(), min_sigma2)
    return LinearModel(w_aug[:, :d], w_aug[:, d], sigma2)


def fit_em(model, values, mask, iters, callback=None):
    """Run ``iters`` EM steps; returns the fitted model and the log-likelihood trace.

    The trace has ``iters + 1`` entries (initial model first).
    """
    trace = [observed_loglik(model, values, mask)]
    for it in range(iters):
        model = em_step(model, values, mask)
        trace.append(observed_loglik(model, values, mask))
        if callback is not None:
            callback(it, model, trace[-1])
    return model, trace


# ---------------------------------------------------------------- SGD


@dataclass
class LinearFitReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    masked_mse: list = field(default_factory=list)
    seconds: float = 0.0


def linear_elbo(W, mu, sigma2, values, mask, ridge=DEFAULT_RIDGE):
    """Masked variational objective of the linear model with its closed-form posterior.

    The posterior mean stands in for the single sample (zero-variance draw);
    the KL uses the full covariance ``sigma2 (W_O^T W_O + ridge I)^-1``.
    Returns the batch-mean loss and the per-sample masked squared error.
    """
    mask = np.asarray(mask, np.float32)
    values = np.asarray(values, np.float32) * mask
    n, D = values.shape
    d = W.shape[1]
    w_obs = T.mul(W, mask[:, :, None])                                   # N, D, d
    gram = T.add(T.matmul(T.transpose(w_obs), W), ridge * np.eye(d, dtype=np.float32))
    resid = T.mul(T.sub(values, mu), mask)
    rhs = T.reshape(T.matmul(T.transpose(w_obs), T.reshape(resid, (n, D, 1))), (n, d))
    x = T.solve_spd(gram, rhs)
    recon = T.add(T.matmul(x, T.transpose(W)), mu)
    sq = T.reduce_sum(T.square(T.mul(T.sub(recon, values), mask)), axis=1)
    eye = np.broadcast_to(np.eye(d, dtype=np.float32), (n, d, d))
    trace_inv = T.reduce_sum(T.mul(T.solve_spd(gram, eye), eye), axis=(1, 2))
    kl = T.mul(T.add(T.sub(T.add(T.mul(trace_inv, sigma2), T.reduce_sum(T.square(x), axis=1)),
                           d + d * math.log(sigma2)),
                     T.logdet_spd(gram)), 0.5)
    loss = T.reduce_mean(T.add(T.mul(sq, 1.0 / sigma2), kl))
    return loss, sq.data


def fit_sgd(model, values, mask, epochs, lr, rng, batch_size=64, val_values=None, val_mask=None,
            ridge=DEFAULT_RIDGE):
    """Adam on the masked variational objective; ``sigma2`` stays fixed.

    Returns the fitted model (best validation epoch, or last epoch without a
    validation set) and a :class:`LinearFitReport`.
    """
    values = np.asarray(values, np.float32).reshape(len(values), -1)
    mask = np.asarray(mask, np.float32).reshape(len(mask), -1)
    W = T.Parameter(model.W.astype(np.float32), "linear.W")
    mu = T.Parameter(model.mu.astype(np.float32), "linear.mu")
    opt = T.Adam([W, mu], lr=lr)
    report = LinearFitReport()
    best, best_val = model.copy(), math.inf
    started = time.perf_counter()
    for epoch in range(epochs):
        total, sq_total = 0.0, 0.0
        for idx in batches(len(values), batch_size, rng.permutation(len(values))):
            opt.zero_grad()
            loss, sq = linear_elbo(W, mu, model.sigma2, values[idx], mask[idx], ridge)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"linear SGD diverged in epoch {epoch}",
                                      last_good=best.state_dict())
            T.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
            sq_total += float(sq.sum())
        report.train_loss.append(total / len(values))
        report.masked_mse.append(sq_total / mask.sum())
        current = LinearModel(W.data, mu.data, model.sigma2)
        val = report.train_loss[-1]
        if val_values is not None and len(val_values):
            vv = np.asarray(val_values, np.float32).reshape(len(val_values), -1)
            vm = np.asarray(val_mask, np.float32).reshape(len(val_mask), -1)
            with T.no_grad():
                val = sum(float(linear_elbo(W, mu, model.sigma2, vv[i], vm[i], ridge)[0].data) * len(i)
                          for i in batches(len(vv), 256)) / len(vv)
        report.val_loss.append(val)
        if val < best_val:
            best, best_val = current.copy(), val
    report.seconds = time.perf_counter() - started
    return best, report
