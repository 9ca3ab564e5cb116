"""Deep non-linear subspace model trained with a masked variational objective.

Six encoder variants share one decoder family:

==================  ==========================================================
conv-zero           zero-filled image, plain residual conv encoder
conv-mean           per-pixel dataset mean fill, plain encoder
conv-interp         separable linear interpolation fill, plain encoder
conv-interp-wmask   interpolated image and the mask as two input channels
conv-sparse         mask-normalized convolutions and masked pooling throughout
conv-fc-sparse      conv-sparse trunk followed by a least-squares FC layer
==================  ==========================================================

The fully convolutional variants use a spatial latent (a diagonal Gaussian
per latent location); conv-fc-sparse uses a ``latent_dim`` vector.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DivergenceError, NonFiniteError
from .layers import (
    fill_interp,
    fill_mean,
    fill_zero,
    masked_maxpool,
    pad_to_even,
    sparse_conv2d,
    sparse_fc_forward,
)

log = logging.getLogger(__name__)

VARIANTS = ("conv-zero", "conv-mean", "conv-interp", "conv-interp-wmask", "conv-sparse", "conv-fc-sparse")
SPARSE_VARIANTS = ("conv-sparse", "conv-fc-sparse")
LOGVAR_RANGE = (-10.0, 10.0)
# second conv of each residual branch starts small so deep stacks do not blow up at init
RESIDUAL_INIT_SCALE = 0.2


def default_blocks(image_shape):
    """Pooling depth: five blocks from 64 pixels up, otherwise halve while >= 7 remain."""
    size = min(image_shape)
    if size >= 64:
        return 5
    blocks = 0
    while math.ceil(size / 2) >= 7:
        size = math.ceil(size / 2)
        blocks += 1
    return max(blocks, 1)


@dataclass
class ModelConfig:
    variant: str = "conv-sparse"
    image_shape: tuple = (28, 28)
    latent_dim: int = 10
    latent_channels: int = 4
    n_blocks: int | None = None
    channels: tuple | int = 16
    sigma2: float = 0.1
    k_samples: int = 1
    ridge: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.k_samples < 1:
            raise ValueError("k_samples must be at least 1")
        if self.latent_dim < 1 or self.latent_channels < 1:
            raise ValueError("latent size must be at least 1")
        if self.n_blocks is None:
            self.n_blocks = default_blocks(self.image_shape)
        if isinstance(self.channels, int):
            self.channels = (self.channels,) * self.n_blocks
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != self.n_blocks:
            raise ValueError(f"need one channel width per block ({self.n_blocks}), got {self.channels}")

    @property
    def stage_shapes(self):
        """Spatial extent entering each encoder block, plus the bottleneck extent."""
        shapes = [self.image_shape]
        for _ in range(self.n_blocks):
            h, w = shapes[-1]
            shapes.append((math.ceil(h / 2), math.ceil(w / 2)))
        return shapes

    @property
    def latent_shape(self):
        if self.variant == "conv-fc-sparse":
            return (self.latent_dim,)
        return (self.latent_channels,) + self.stage_shapes[-1]

    def to_dict(self):
        out = asdict(self)
        out["image_shape"] = list(self.image_shape)
        out["channels"] = list(self.channels)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class PosteriorStats:
    mu: T.Tensor
    logvar: T.Tensor


class SubspaceModel:
    """Encoder/decoder pair with named parameters.

    Parameters
    ----------
    config : ModelConfig
    rng : SeededRng
        Source for weight initialization.
    pixel_mean : array (H, W), optional
        Dataset per-pixel observed mean; required by conv-mean.
    """

    def __init__(self, config, rng, pixel_mean=None):
        self.config = config
        self.params = {}
        if config.variant == "conv-mean" and pixel_mean is None:
            raise ValueError("conv-mean needs the dataset pixel mean")
        self.pixel_mean = None if pixel_mean is None else np.asarray(pixel_mean, np.float32)
        self._build(rng)

    # ------------------------------------------------------------ parameters

    def _add(self, name, data):
        self.params[name] = T.Parameter(np.asarray(data, np.float32), name)

    def _conv(self, rng, name, c_in, c_out, k, scale=1.0):
        std = scale * math.sqrt(2.0 / (c_in * k * k))
        self._add(f"{name}.kernel", rng.normal((c_out, c_in, k, k)) * std)
        self._add(f"{name}.bias", np.zeros(c_out))

    def _dense(self, rng, name, n_in, n_out, scale=1.0):
        self._add(f"{name}.weight", rng.normal((n_in, n_out)) * scale * math.sqrt(2.0 / n_in))
        self._add(f"{name}.bias", np.zeros(n_out))

    def _resblock(self, rng, name, c_in, c_out):
        self._conv(rng, f"{name}.conv_a", c_in, c_out, 3)
        self._conv(rng, f"{name}.conv_b", c_out, c_out, 3, scale=RESIDUAL_INIT_SCALE)
        if c_in != c_out:
            self._conv(rng, f"{name}.skip", c_in, c_out, 1)

    def _build(self, rng):
        cfg = self.config
        c_in = 2 if cfg.variant == "conv-interp-wmask" else 1
        for b, width in enumerate(cfg.channels):
            self._resblock(rng, f"enc.block{b}", c_in, width)
            c_in = width
        top = cfg.channels[-1]
        bottleneck = cfg.stage_shapes[-1]
        if cfg.variant == "conv-fc-sparse":
            n_feat = top * bottleneck[0] * bottleneck[1]
            self._add("enc.fc.weight", rng.normal((n_feat, cfg.latent_dim)) / math.sqrt(n_feat))
            self._add("enc.fc.offset", np.zeros(n_feat))
            self._dense(rng, "enc.logvar", cfg.latent_dim, cfg.latent_dim, scale=0.1)
            self._dense(rng, "dec.fc", cfg.latent_dim, n_feat)
        else:
            self._conv(rng, "enc.mu", top, cfg.latent_channels, 1, scale=0.1)
            self._conv(rng, "enc.logvar", top, cfg.latent_channels, 1, scale=0.1)
            self._conv(rng, "dec.in", cfg.latent_channels, top, 3)
        for b in reversed(range(cfg.n_blocks)):
            out = cfg.channels[b - 1] if b > 0 else cfg.channels[0]
            self._resblock(rng, f"dec.block{b}", cfg.channels[b], out)
        self._conv(rng, "dec.out", cfg.channels[0], 1, 1, scale=0.1)

    def parameters(self):
        return list(self.params.values())

    def encoder_parameters(self):
        return [p for n, p in self.params.items() if n.startswith("enc.")]

    def decoder_parameters(self):
        return [p for n, p in self.params.items() if n.startswith("dec.")]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float32)

    # ------------------------------------------------------------ layers

    def _conv_apply(self, name, x):
        p = self.params
        out = T.conv2d(x, p[f"{name}.kernel"])
        return T.add(out, T.reshape(p[f"{name}.bias"], (1, -1, 1, 1)))

    def _sparse_apply(self, name, x, mask, bias=True):
        p = self.params
        return sparse_conv2d(x, mask, p[f"{name}.kernel"], p[f"{name}.bias"] if bias else None)

    def _dense_apply(self, name, x):
        return T.add(T.matmul(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])

    def _plain_block(self, name, x):
        h = T.relu(self._conv_apply(f"{name}.conv_a", x))
        h = self._conv_apply(f"{name}.conv_b", h)
        skip = self._conv_apply(f"{name}.skip", x) if f"{name}.skip.kernel" in self.params else x
        return T.relu(T.add(h, skip))

    def _sparse_block(self, name, x, mask):
        h, m_a = self._sparse_apply(f"{name}.conv_a", x, mask)
        h, m_b = self._sparse_apply(f"{name}.conv_b", T.relu(h), m_a)
        if f"{name}.skip.kernel" in self.params:
            skip, m_skip = self._sparse_apply(f"{name}.skip", x, mask, bias=False)
        else:
            skip, m_skip = x, mask
        return T.relu(T.add(h, T.mul(skip, m_b * m_skip))), m_b

    # ------------------------------------------------------------ encoder / decoder

    def encoder_input(self, values, mask):
        """The dense input image(s) a non-sparse encoder sees, shape (N, C, H, W)."""
        v = self.config.variant
        if v == "conv-zero":
            img = fill_zero(values, mask)[:, None]
        elif v == "conv-mean":
            img = fill_mean(values, mask, self.pixel_mean)[:, None]
        elif v == "conv-interp":
            img = fill_interp(values, mask)[:, None]
        elif v == "conv-interp-wmask":
            img = np.stack([fill_interp(values, mask), np.asarray(mask, np.float32)], axis=1)
        else:
            img = (np.asarray(values, np.float32) * mask)[:, None]
        return img.astype(np.float32)

    def encode(self, values, mask):
        """Posterior statistics for a batch of sparse images (N, H, W)."""
        cfg = self.config
        values = np.asarray(values, np.float32)
        mask = np.asarray(mask, np.float32)
        x = T.Tensor(self.encoder_input(values, mask))
        if cfg.variant in SPARSE_VARIANTS:
            m = mask[:, None]
            if not m.any():
                log.info("encode: batch has no observed pixels")
            for b in range(cfg.n_blocks):
                x, m = self._sparse_block(f"enc.block{b}", x, m)
                x, m = pad_to_even(x, m)
                x, m = masked_maxpool(x, m)
        else:
            for b in range(cfg.n_blocks):
                x = self._plain_block(f"enc.block{b}", x)
                x, _ = pad_to_even(x)
                x = T.maxpool2d(x)
        if cfg.variant == "conv-fc-sparse":
            n = x.shape[0]
            flat = T.reshape(x, (n, -1))
            flat_mask = np.broadcast_to(m, x.shape).reshape(n, -1)
            mu = sparse_fc_forward(self.params["enc.fc.weight"], self.params["enc.fc.offset"],
                                   flat, flat_mask, cfg.ridge)
            logvar = self._dense_apply("enc.logvar", mu)
        elif cfg.variant == "conv-sparse":
            mu, _ = self._sparse_apply("enc.mu", x, m)
            logvar, _ = self._sparse_apply("enc.logvar", x, m)
        else:
            mu = self._conv_apply("enc.mu", x)
            logvar = self._conv_apply("enc.logvar", x)
        return PosteriorStats(mu, T.clip(logvar, *LOGVAR_RANGE))

    def decode(self, z):
        """Dense image estimate (N, H, W) for latent codes ``z``."""
        cfg = self.config
        z = T.as_tensor(z)
        bottleneck = cfg.stage_shapes[-1]
        if cfg.variant == "conv-fc-sparse":
            h = T.relu(self._dense_apply("dec.fc", z))
            h = T.reshape(h, (z.shape[0], cfg.channels[-1]) + bottleneck)
        else:
            h = T.relu(self._conv_apply("dec.in", z))
        for b in reversed(range(cfg.n_blocks)):
            h = T.crop2d(T.upsample2x_nearest(h), *cfg.stage_shapes[b])
            h = self._plain_block(f"dec.block{b}", h)
        out = self._conv_apply("dec.out", h)
        return T.reshape(out, (out.shape[0],) + cfg.image_shape)

    # ------------------------------------------------------------ objective

    def elbo_loss(self, values, mask, rng, k_samples=None):
        """Mean over the batch of the negative variational lower bound.

        Reconstruction error counts observed pixels only.  Returns the scalar
        loss tensor and a dict of per-term batch means.
        """
        cfg = self.config
        k = k_samples or cfg.k_samples
        mask = np.asarray(mask, np.float32)
        target = np.asarray(values, np.float32) * mask
        stats = self.encode(values, mask)
        recon = None
        for _ in range(k):
            z = T.gaussian_sample(stats.mu, stats.logvar, rng)
            err = T.mul(T.sub(self.decode(z), target), mask)
            term = T.reduce_sum(T.square(err), axis=(1, 2))
            recon = term if recon is None else T.add(recon, term)
        recon = T.mul(recon, 1.0 / (k * cfg.sigma2))
        kl = kl_to_standard_normal(stats.mu, stats.logvar)
        loss = T.reduce_mean(T.add(recon, kl))
        terms = {"recon": float(recon.data.mean()), "kl": float(kl.data.mean())}
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss (recon={terms['recon']}, kl={terms['kl']})")
        return loss, terms


def kl_to_standard_normal(mu, logvar):
    """Per-sample KL[N(mu, diag(exp(logvar))) || N(0, I)], summed over all latent axes."""
    axes = tuple(range(1, mu.ndim))
    inner = T.sub(T.add(T.exp(logvar), T.square(mu)), T.add(logvar, 1.0))
    return T.mul(T.reduce_sum(inner, axis=axes), 0.5)


# ---------------------------------------------------------------- training


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1
    best_val: float = math.inf
    seconds: float = 0.0


def batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_loss(model, values, mask, seed, batch_size=256):
    """Sample-weighted mean ELBO over a dataset with a fixed noise stream."""
    rng = T.SeededRng(seed, 0x5EED)
    total = 0.0
    with T.no_grad():
        for idx in batches(len(values), batch_size):
            loss, _ = model.elbo_loss(values[idx], mask[idx], rng)
            total += float(loss.data) * len(idx)
    return total / len(values)


def train(model, values, mask, epochs, batch_size, lr, rng, val_values=None, val_mask=None,
          on_epoch=None):
    """Adam over shuffled mini-batches; keeps the parameters with the best validation loss.

    Without a validation set the training loss picks the best epoch.
    ``on_epoch(epoch, train_loss, val_loss)`` is called after every epoch.
    """
    values = np.asarray(values, np.float32)
    mask = np.asarray(mask, np.float32)
    if len(values) == 0:
        raise ValueError("training set is empty")
    opt = T.Adam(model.parameters(), lr=lr)
    report = TrainingReport()
    best_state = model.state_dict()
    started = time.perf_counter()
    for epoch in range(epochs):
        total = 0.0
        last_good = model.state_dict()
        for step, idx in enumerate(batches(len(values), batch_size, rng.permutation(len(values)))):
            opt.zero_grad()
            try:
                loss, terms = model.elbo_loss(values[idx], mask[idx], rng)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {step}: {exc}", last_good=best_state,
                                      diagnostics={"epoch": epoch, "batch": step}) from exc
            T.backward(loss)
            opt.step()
            report.steps += 1
            total += float(loss.data) * len(idx)
            if not all(np.isfinite(p.data).all() for p in model.parameters()):
                model.load_state_dict(last_good)
                raise DivergenceError(f"epoch {epoch}, batch {step}: parameters became non-finite",
                                      last_good=best_state, diagnostics={"epoch": epoch, "batch": step, **terms})
            last_good = model.state_dict()
        train_loss = total / len(values)
        val_loss = train_loss
        if val_values is not None and len(val_values):
            val_loss = evaluate_loss(model, val_values, val_mask, rng.seed)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if val_loss < report.best_val:
            report.best_val, report.best_epoch = val_loss, epoch
            best_state = model.state_dict()
        log.info("epoch %d: train %.4f val %.4f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
    model.load_state_dict(best_state)
    report.seconds = time.perf_counter() - started
    return report
