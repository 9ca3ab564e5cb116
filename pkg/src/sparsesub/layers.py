"""Sparsity-aware building blocks.

Masks are plain float32/bool NumPy arrays (they are never differentiated);
values and parameters are :class:`~sparsesub.tensor.Tensor` objects.  Spatial
masks are carried as (N, 1, H, W) and broadcast over channels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError

log = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-5


@dataclass
class SparseSample:
    """Image values with their observation mask.

    ``values`` is zero wherever ``mask`` is zero.  ``ground_truth`` is only
    used for evaluation and never reaches a training path.  Leading axes are
    free, so the same type holds a single image or a batch.
    """

    values: np.ndarray
    mask: np.ndarray
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.values.shape != self.mask.shape:
            raise ShapeError(f"values {self.values.shape} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        if np.any(self.values[self.mask == 0] != 0):
            raise ValueError("values must be zero at unobserved entries")

    @classmethod
    def from_image(cls, image, mask):
        """Hide the unobserved part of a full ``image``; the image becomes ground truth."""
        image = np.asarray(image, dtype=np.float32)
        mask = np.asarray(mask, dtype=np.float32)
        return cls(image * mask, mask, image)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, idx):
        gt = None if self.ground_truth is None else self.ground_truth[idx]
        return SparseSample(self.values[idx], self.mask[idx], gt)


# ---------------------------------------------------------------- sparse fully connected


def canonical_observed_index(table, offset, values, mask):
    """Per-sample indices of observed rows, padded with -1.

    Rows are ordered by their content (``table`` row, ``offset`` entry, value)
    rather than by position, so any consistent permutation of pixels yields
    exactly the same gathered arrays and hence bit-identical arithmetic.
    """
    mask = np.asarray(mask) > 0
    counts = mask.sum(axis=1)
    index = np.full((mask.shape[0], max(int(counts.max(initial=0)), 1)), -1, dtype=np.int64)
    for n in range(mask.shape[0]):
        obs = np.flatnonzero(mask[n])
        if obs.size == 0:
            continue
        keys = np.column_stack([table[obs], offset[obs], values[n, obs]])
        index[n, :obs.size] = obs[np.lexsort(keys.T[::-1])]
    return index


def sparse_fc_forward(weight, offset, values, mask, ridge=DEFAULT_RIDGE):
    """Least-squares response of a linear layer to partially observed input.

    Solves ``(W_O^T W_O + ridge I) r = W_O^T (y_O - mu_O)`` for every sample,
    where ``_O`` selects the observed rows.

    Parameters
    ----------
    weight : Tensor, shape (D, d)
    offset : Tensor, shape (D,)
        The layer's ``mu_y``.
    values : Tensor or array, shape (N, D) or (D,)
    mask : array, same shape as ``values``
    ridge : float
        Keeps the normal matrix invertible when fewer than ``d`` informative
        rows are observed (including the all-unobserved case, where r = 0).

    Returns
    -------
    Tensor, shape (N, d) or (d,)
    """
    weight, offset, values = T.as_tensor(weight), T.as_tensor(offset), T.as_tensor(values)
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    single = values.ndim == 1
    if single:
        values = T.reshape(values, (1, -1))
        mask = np.asarray(mask).reshape(1, -1)
    D, d = weight.shape
    if values.shape[1] != D or offset.shape != (D,):
        raise ShapeError(f"sparse_fc_forward: W {weight.shape}, mu {offset.shape}, y {values.shape}")
    if d > D:
        raise ShapeError(f"latent size {d} exceeds input size {D}")
    index = canonical_observed_index(weight.data, offset.data, values.data, mask)
    w_obs = T.take_rows(weight, index)                                # N, n, d
    resid = T.sub(T.take_per_sample(values, index), T.take_rows(offset, index))
    r = T.ridge_lstsq(w_obs, resid, ridge)
    return T.reshape(r, (d,)) if single else r


# ---------------------------------------------------------------- sparse convolution


def _spatial(mask):
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim == 1:
        return mask[None, :], (lambda m: m[0])
    return mask, (lambda m: m)


def propagate_mask(mask, kernel_extent):
    """Dilate a binary mask by a kernel footprint: 1 wherever any tap is observed.

    ``kernel_extent`` is an int (square kernel; along the single axis for 1-D
    masks) or a ``(kh, kw)`` pair.
    """
    mask, restore = _spatial(mask)
    if isinstance(kernel_extent, int):
        kh, kw = (1, kernel_extent) if restore(mask).ndim == 1 else (kernel_extent, kernel_extent)
    else:
        kh, kw = kernel_extent
    return restore((T.window_count(mask, kh, kw) > 0).astype(np.float32))


def sparse_conv2d(x, mask, kernel, bias=None):
    """Mask-normalized convolution.

    The response at each location is the convolution of the observed values,
    rescaled by ``(in-bounds taps) / (observed taps)`` in the kernel window;
    it is zero where no tap is observed.  ``bias`` is added after
    normalization and only where the propagated mask is 1.

    Parameters
    ----------
    x : Tensor, (N, C, H, W)
    mask : array, (N, 1, H, W)
    kernel : Tensor, (C_out, C, kh, kw), odd extents
    bias : Tensor, (C_out,), optional

    Returns
    -------
    (Tensor, ndarray)
        Response (N, C_out, H, W) and the propagated mask (N, 1, H, W).
    """
    mask = np.asarray(mask, dtype=np.float32)
    kh, kw = kernel.shape[-2:]
    if x.ndim != 4 or mask.shape != (x.shape[0], 1) + x.shape[2:]:
        raise ShapeError(f"sparse_conv2d: x {x.shape} vs mask {mask.shape}")
    observed = T.window_count(mask, kh, kw)
    taps = T.window_count(np.ones((1, 1) + mask.shape[2:], np.float32), kh, kw)
    new_mask = (observed > 0).astype(np.float32)
    scale = np.divide(taps, observed, out=np.zeros_like(observed), where=observed > 0)
    out = T.mul(T.conv2d(T.mul(x, mask), kernel), scale)
    if bias is not None:
        out = T.add(out, T.mul(T.reshape(bias, (1, -1, 1, 1)), new_mask))
    return out, new_mask


def sparse_conv_1d_response(values, mask, kernel):
    """Single-row convenience wrapper used for hand-checkable examples."""
    values = np.asarray(values, np.float32)[None, None, None, :]
    mask = np.asarray(mask, np.float32)[None, None, None, :]
    kernel = np.asarray(kernel, np.float32)[None, None, None, :]
    out, new_mask = sparse_conv2d(T.Tensor(values), mask, T.Tensor(kernel))
    return out.data[0, 0, 0], new_mask[0, 0, 0]


def pool_mask(mask):
    """Logical-OR 2x2 pooling of an (N, 1, H, W) mask."""
    n, c, h, w = mask.shape
    return mask.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def masked_maxpool(x, mask):
    """2x2 max pooling over observed entries only; all-unobserved windows give 0."""
    return T.maxpool2d(x, mask), pool_mask(np.asarray(mask, dtype=np.float32))


def pad_to_even(x, mask=None):
    """Zero-pad (mask-pad with "unobserved") odd spatial extents at the bottom/right."""
    h, w = x.shape[-2:]
    x = T.pad2d(x, h % 2, w % 2)
    if mask is not None:
        mask = np.pad(mask, [(0, 0)] * (mask.ndim - 2) + [(0, h % 2), (0, w % 2)])
    return x, mask


# ---------------------------------------------------------------- fill strategies


def fill_zero(values, mask):
    return np.where(np.asarray(mask) > 0, values, 0).astype(np.float32)


def fill_mean(values, mask, pixel_mean):
    """Replace unobserved entries with the dataset's per-pixel observed mean."""
    return np.where(np.asarray(mask) > 0, values, pixel_mean).astype(np.float32)


# per-pixel quality of a 1-D estimate, best first
_BRACKETED, _EXTRAPOLATED, _SINGLE_ANCHOR, _NO_ANCHOR = 3, 2, 1, 0


def _interp_lines(values, mask):
    """Linear interpolation along the last axis of a 2-D image.

    Beyond the outermost anchors the line through the two nearest anchors is
    extended; a line with a single anchor is constant.  Returns the estimate
    and a per-pixel quality code.
    """
    out = np.zeros(values.shape, dtype=np.float64)
    quality = np.full(values.shape, _NO_ANCHOR, dtype=np.int8)
    positions = np.arange(values.shape[-1], dtype=np.float64)
    for row in range(values.shape[0]):
        anchors = np.flatnonzero(mask[row])
        if anchors.size == 0:
            continue
        known = values[row, anchors].astype(np.float64)
        if anchors.size == 1:
            out[row] = known[0]
            quality[row] = _SINGLE_ANCHOR
            continue
        line = np.interp(positions, anchors, known)
        left, right = positions < anchors[0], positions > anchors[-1]
        slope_l = (known[1] - known[0]) / (anchors[1] - anchors[0])
        slope_r = (known[-1] - known[-2]) / (anchors[-1] - anchors[-2])
        line[left] = known[0] + slope_l * (positions[left] - anchors[0])
        line[right] = known[-1] + slope_r * (positions[right] - anchors[-1])
        out[row] = line
        quality[row] = np.where(left | right, _EXTRAPOLATED, _BRACKETED)
    return out, quality


def fill_interp(values, mask, return_flag=False):
    """Fill unobserved pixels by separable 1-D linear interpolation.

    Rows and columns are interpolated independently.  Each pixel averages the
    passes of the best available kind: bracketed by two anchors, then linear
    extrapolation, then a lone anchor's constant.  A pixel reached by neither
    pass takes the image's observed mean.
    Observed pixels are returned unchanged.  Works on (H, W) or (N, H, W).

    With ``return_flag=True`` also returns a boolean per image that is True
    when the image had no observed pixel (and was filled with zeros).
    """
    values = np.asarray(values, dtype=np.float32)
    mask = np.asarray(mask) > 0
    if values.ndim == 1:
        filled, flag = fill_interp(values[None], mask[None], True)
        filled = filled[0]
    elif values.ndim == 3:
        pairs = [fill_interp(v, m, True) for v, m in zip(values, mask)]
        filled = np.stack([p[0] for p in pairs]) if pairs else values.copy()
        flag = np.array([p[1] for p in pairs], dtype=bool)
    else:
        if not mask.any():
            log.warning("fill_interp: image has no observed pixels, returning zeros")
            filled, flag = np.zeros_like(values), True
        else:
            by_row, q_row = _interp_lines(values, mask)
            by_col, q_col = _interp_lines(values.T, mask.T)
            by_col, q_col = by_col.T, q_col.T
            best = np.maximum(q_row, q_col)
            use_row, use_col = (q_row == best) & (best > _NO_ANCHOR), (q_col == best) & (best > _NO_ANCHOR)
            count = use_row.astype(np.float64) + use_col
            total = np.where(use_row, by_row, 0.0) + np.where(use_col, by_col, 0.0)
            fallback = values[mask].mean(dtype=np.float64)
            both = np.divide(total, count, out=np.full(total.shape, fallback), where=count > 0)
            filled, flag = np.where(mask, values, both).astype(np.float32), False
    return (filled, flag) if return_flag else filled
