"""Deep-image-prior baseline: fit a fresh decoder to the observed pixels of one image."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import DivergenceError
from .model import ModelConfig, SubspaceModel

DEFAULT_ITERATIONS = 1000
DEFAULT_LR = 1e-3
_LATENT_STREAM = 21
_INIT_STREAM = 22


@dataclass
class DipRun:
    """A decoder fitted to a single image from a frozen random latent."""

    model: SubspaceModel
    latent: np.ndarray
    iterations: int
    lr: float
    loss_trace: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def decoder_state(self):
        return {k: v for k, v in self.model.state_dict().items() if k.startswith("dec.")}


def dip_config(config):
    """The conv-sparse decoder matching ``config``'s image shape and widths."""
    return replace(config, variant="conv-sparse")


def dip_fit(image, config, rng, iterations=DEFAULT_ITERATIONS, lr=DEFAULT_LR):
    """Adam on the masked squared error of ``decode(latent)`` for one image.

    Parameters
    ----------
    image : SparseSample
        A single (H, W) image and mask.
    config : ModelConfig
        Only the decoder part (image shape, widths, latent channels) is used.
    rng : SeededRng
        Drives both the decoder initialization and the frozen latent.
    """
    values = np.asarray(image.values, np.float32)
    mask = np.asarray(image.mask, np.float32)
    if not mask.any():
        raise ValueError("dip_fit needs at least one observed pixel")
    cfg = dip_config(config if isinstance(config, ModelConfig) else ModelConfig(**config))
    model = SubspaceModel(cfg, rng.child(_INIT_STREAM))
    latent = rng.child(_LATENT_STREAM).normal((1,) + cfg.latent_shape)
    params = model.decoder_parameters()
    opt = T.Adam(params, lr=lr)
    target = (values * mask)[None]
    n_obs = float(mask.sum())
    run = DipRun(model, latent, iterations, lr)
    started = time.perf_counter()
    for it in range(iterations):
        opt.zero_grad()
        err = T.mul(T.sub(model.decode(latent), target), mask[None])
        loss = T.mul(T.reduce_sum(T.square(err)), 1.0 / n_obs)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"DIP loss became non-finite at iteration {it}", last_good=run.decoder_state)
        T.backward(loss)
        opt.step()
        run.loss_trace.append(float(loss.data))
    run.seconds = time.perf_counter() - started
    return run


def dip_synthesize(run):
    """Dense image ``decode(latent)`` of a fitted run, shape (H, W)."""
    with T.no_grad():
        return run.model.decode(run.latent).data[0].copy()
