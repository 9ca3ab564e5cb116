"""Imputation from trained models and the missing-pixel error metric."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NoMissingPixelsError
from .linear import LinearModel, impute_linear
from .model import batches

DEFAULT_K = 10


@dataclass
class ImputationResult:
    point_estimate: np.ndarray
    samples: list = field(default_factory=list)
    mse: np.ndarray | None = None
    observed_residual: np.ndarray | None = None


def impute_conditional_mean(model, values, mask, k=DEFAULT_K, rng=None, mean_mode=False, batch_size=256):
    """Average of ``k`` decoded posterior draws; ``(N, H, W)`` in and out.

    ``mean_mode`` (or ``k == 0``) decodes the posterior mean directly.  With
    ``rng=None`` every draw uses eps = 0, so the result is ``decode(mu)``.
    Linear models use their closed-form conditional mean.
    """
    if isinstance(model, LinearModel):
        return impute_linear(model, values, mask).astype(np.float32)
    if k < 0:
        raise ValueError("k must be non-negative")
    values = np.asarray(values, np.float32)
    mask = np.asarray(mask, np.float32)
    out = np.empty(values.shape, np.float32)
    with T.no_grad():
        for idx in batches(len(values), batch_size):
            stats = model.encode(values[idx], mask[idx])
            if mean_mode or k == 0 or rng is None:
                out[idx] = model.decode(stats.mu).data
                continue
            # all k draws go through the decoder as one batch; eps is drawn in the same stream order
            mu = np.broadcast_to(stats.mu.data, (k,) + stats.mu.shape)
            logvar = np.broadcast_to(stats.logvar.data, mu.shape)
            z = T.gaussian_sample(T.Tensor(mu), T.Tensor(logvar), rng)
            decoded = model.decode(T.reshape(z, (-1,) + stats.mu.shape[1:])).data
            out[idx] = decoded.reshape((k, len(idx)) + values.shape[1:]).mean(axis=0, dtype=np.float64)
    return out


def impute_samples(model, values, mask, n_draws, include_pixel_noise, rng):
    """Multiple imputations: decode posterior draws, optionally adding N(0, sigma2) pixel noise.

    ``rng=None`` forces eps = 0 and suppresses pixel noise, so every draw is ``decode(mu)``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    values = np.asarray(values, np.float32)
    mask = np.asarray(mask, np.float32)
    sigma = np.sqrt(model.config.sigma2)
    draws = []
    with T.no_grad():
        stats = model.encode(values, mask)
        for _ in range(n_draws):
            img = model.decode(T.gaussian_sample(stats.mu, stats.logvar, rng)).data
            if include_pixel_noise and rng is not None:
                img = img + sigma * rng.normal(img.shape)
            draws.append(img.astype(np.float32))
    return draws


def _check_missing(mask):
    missing = 1.0 - np.asarray(mask, np.float64)
    if not missing.any():
        raise NoMissingPixelsError("no missing pixels: the metric is undefined on a full mask")
    return missing


def missing_pixel_mse(imputed, ground_truth, mask):
    """Mean squared error over unobserved entries only (pooled over all images)."""
    missing = _check_missing(mask)
    diff = np.asarray(imputed, np.float64) - np.asarray(ground_truth, np.float64)
    return float(np.sum(diff * diff * missing) / missing.sum())


def per_image_mse(imputed, ground_truth, mask):
    """Missing-pixel MSE of each image; NaN for images with nothing missing."""
    missing = 1.0 - np.asarray(mask, np.float64)
    diff = np.asarray(imputed, np.float64) - np.asarray(ground_truth, np.float64)
    n = len(missing)
    num = np.sum((diff * diff * missing).reshape(n, -1), axis=1)
    den = missing.reshape(n, -1).sum(axis=1)
    return np.divide(num, den, out=np.full(n, np.nan), where=den > 0)


def observed_residual(imputed, values, mask):
    """Mean squared deviation of the imputation from the observed pixels (the model denoises)."""
    mask = np.asarray(mask, np.float64)
    if not mask.any():
        return float("nan")
    diff = np.asarray(imputed, np.float64) - np.asarray(values, np.float64)
    return float(np.sum(diff * diff * mask) / mask.sum())


def impute(model, values, mask, ground_truth=None, k=DEFAULT_K, rng=None, n_draws=0,
           include_pixel_noise=False):
    """Point estimate, optional draws and per-image metrics in one call."""
    point = impute_conditional_mean(model, values, mask, k=k, rng=rng)
    result = ImputationResult(point, observed_residual=observed_residual(point, values, mask))
    if n_draws:
        result.samples = impute_samples(model, values, mask, n_draws, include_pixel_noise, rng)
    if ground_truth is not None:
        result.mse = per_image_mse(point, ground_truth, mask)
    return result
