"""Reverse-mode automatic differentiation over dense float32 arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  The
graph is rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order and accumulates into the ``grad`` slots of leaves.

Convolutions take NCHW activations and OIHW kernels but run internally on a
channels-last im2col layout, which is what a single BLAS ``sgemm`` wants.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DecompositionError, NonFiniteError, ShapeError

DTYPE = np.float32

_grad_enabled = True
_dtype = DTYPE


def working_dtype():
    """The dtype new tensors are stored in (float32 unless inside :func:`precision`)."""
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Store tensors created inside the block as ``dtype``.

    Meant for float64 finite-difference checks; parameters created outside
    keep their own dtype until reassigned.
    """
    global _dtype
    previous, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, evaluation)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float32 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return np.array(self.data)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named trainable leaf whose gradient accumulates across backward calls."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def assert_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
    return t


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.astype(_dtype) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x):
    x = as_tensor(x)
    return _make(np.square(x.data), (x,), lambda g: (2 * g * x.data,), "square")


def clip(x, lo, hi):
    """Clamp values; the gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(_dtype)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(_dtype),)

    return _make(out, (x,), grad, "reduce_sum")


def reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return mul(reduce_sum(x, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat_channels(tensors):
    """Concatenate NCHW tensors along the channel axis."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[1] for t in tensors]
    for t in tensors[1:]:
        if t.shape[:1] + t.shape[2:] != tensors[0].shape[:1] + tensors[0].shape[2:]:
            raise ShapeError(f"concat_channels: {t.shape} vs {tensors[0].shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def pad2d(x, bottom, right):
    """Zero-pad the last two axes at the bottom/right edge."""
    x = as_tensor(x)
    if bottom == 0 and right == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(0, bottom), (0, right)]
    h, w = x.shape[-2:]
    return _make(np.pad(x.data, width), (x,), lambda g: (g[..., :h, :w],), "pad2d")


def crop2d(x, height, width):
    """Keep the top-left ``height`` x ``width`` window of the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == (height, width):
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, h - height), (0, w - width)]
    return _make(x.data[..., :height, :width], (x,), lambda g: (np.pad(g, pad),), "crop2d")


def take_rows(table, index):
    """Gather rows of a shared ``table``; index ``-1`` yields a zero row.

    The result has shape ``index.shape + table.shape[1:]``.
    """
    index = np.asarray(index)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = table.data[safe] * valid.reshape(valid.shape + (1,) * (table.ndim - 1))

    def grad(g):
        full = np.zeros_like(table.data)
        np.add.at(full, safe[valid], g[valid])
        return (full,)

    return _make(out, (table,), grad, "take_rows")


def take_per_sample(x, index):
    """Gather ``x[n, index[n, j]]`` for a batch ``x`` of shape (N, D); ``-1`` yields zero."""
    index = np.asarray(index)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = np.take_along_axis(x.data, safe, axis=1) * valid

    def grad(g):
        full = np.zeros_like(x.data)
        rows = np.broadcast_to(np.arange(x.shape[0])[:, None], index.shape)
        np.add.at(full, (rows[valid], safe[valid]), g[valid])
        return (full,)

    return _make(out, (x,), grad, "take_per_sample")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Batched matrix product with NumPy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad, "matmul")


def _cholesky(a64):
    try:
        return np.linalg.cholesky(a64)
    except np.linalg.LinAlgError:
        pass
    flat = a64.reshape((-1,) + a64.shape[-2:])
    for item, mat in enumerate(flat):
        for k in range(1, mat.shape[0] + 1):
            try:
                np.linalg.cholesky(mat[:k, :k])
            except np.linalg.LinAlgError:
                raise DecompositionError(
                    f"matrix {item} of the batch is not positive definite: "
                    f"leading minor of order {k} fails", minor=k) from None
    raise DecompositionError("Cholesky factorization failed")


def _cho_solve(chol, rhs):
    lower = np.linalg.solve(chol, rhs)
    return np.linalg.solve(np.swapaxes(chol, -1, -2), lower)


def solve_spd(a, b):
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky.

    ``a`` is (..., d, d); ``b`` is (..., d) or (..., d, k).  The factorization
    and both triangular solves run in float64.  The returned gradient for ``a``
    is symmetrized, which is exact for any symmetric parametrization of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    d = a.shape[-1]
    if a.shape[-2] != d:
        raise ShapeError(f"solve_spd needs square matrices, got {a.shape}")
    vector = b.ndim == a.ndim - 1
    if (vector and b.shape[-1] != d) or (not vector and b.shape[-2] != d):
        raise ShapeError(f"solve_spd: rhs {b.shape} does not match {a.shape}")
    chol = _cholesky(a.data.astype(np.float64))
    rhs = b.data.astype(np.float64)
    if vector:
        rhs = rhs[..., None]
    x64 = _cho_solve(chol, rhs)
    out = x64[..., 0] if vector else x64

    def grad(g):
        g64 = g.astype(np.float64)
        if vector:
            g64 = g64[..., None]
        gb = _cho_solve(chol, g64)
        outer = np.matmul(gb, np.swapaxes(x64, -1, -2))
        ga = -0.5 * (outer + np.swapaxes(outer, -1, -2))
        gb = gb[..., 0] if vector else gb
        return _unbroadcast(ga, a.shape).astype(_dtype), _unbroadcast(gb, b.shape).astype(_dtype)

    return _make(out.astype(_dtype), (a, b), grad, "solve_spd")


def ridge_lstsq(w, b, ridge):
    """Ridge least squares ``(w^T w + ridge I)^-1 w^T b`` for a batch of small systems.

    ``w`` is (..., n, d) and ``b`` is (..., n).  Fusing the normal matrix into
    the solve keeps the whole computation in float64, so ill-conditioned
    systems lose precision only once, at the final rounding to float32.
    """
    w, b = as_tensor(w), as_tensor(b)
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    if b.shape != w.shape[:-1]:
        raise ShapeError(f"ridge_lstsq: rhs {b.shape} does not match {w.shape}")
    w64, b64 = w.data.astype(np.float64), b.data.astype(np.float64)
    wt = np.swapaxes(w64, -1, -2)
    chol = _cholesky(np.matmul(wt, w64) + ridge * np.eye(w.shape[-1]))
    x64 = _cho_solve(chol, np.matmul(wt, b64[..., None]))[..., 0]

    def grad(g):
        u = _cho_solve(chol, g.astype(np.float64)[..., None])[..., 0]
        resid = b64 - np.matmul(w64, x64[..., None])[..., 0]
        # d/dw of x = A^-1 w^T b with A = w^T w + ridge I
        gw = resid[..., :, None] * u[..., None, :] - np.matmul(w64, u[..., :, None]) * x64[..., None, :]
        gb = np.matmul(w64, u[..., None])[..., 0]
        return gw.astype(_dtype), gb.astype(_dtype)

    return _make(x64.astype(_dtype), (w, b), grad, "ridge_lstsq")


def logdet_spd(a):
    """Log-determinant of a batch of SPD matrices, via Cholesky in float64."""
    chol = _cholesky(a.data.astype(np.float64))
    out = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)

    def grad(g):
        eye = np.broadcast_to(np.eye(a.shape[-1]), chol.shape)
        inv = _cho_solve(chol, eye)
        return ((np.asarray(g, np.float64)[..., None, None] * inv).astype(_dtype),)

    return _make(out.astype(_dtype), (a,), grad, "logdet_spd")


# ---------------------------------------------------------------- convolution


def _as_batch(x):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected CHW or NCHW input, got shape {x.shape}")
    return x, False


def _im2col(xh, kh, kw, pad_h, pad_w):
    """Channels-last patches: (N, H, W, C) -> (N*Ho*Wo, kh*kw*C)."""
    if pad_h or pad_w:
        xh = np.pad(xh, ((0, 0), (pad_h, pad_h), (pad_w, pad_w), (0, 0)))
    n, _, _, c = xh.shape
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))
    ho, wo = win.shape[1:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c), (n, ho, wo)


def _conv_nhwc(xh, kernel, pad_h, pad_w):
    o, _, kh, kw = kernel.shape
    cols, (n, ho, wo) = _im2col(xh, kh, kw, pad_h, pad_w)
    kmat = kernel.transpose(2, 3, 1, 0).reshape(-1, o)
    return (cols @ kmat).reshape(n, ho, wo, o), cols


def conv2d(x, kernel, padding="same"):
    """2-D cross-correlation with zero padding, stride 1.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``kernel`` is (C_out, C_in, kh, kw).
    """
    x, squeeze = _as_batch(as_tensor(x))
    kernel = as_tensor(kernel)
    o, c, kh, kw = kernel.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding needs odd kernel extents")
        pad_h, pad_w = kh // 2, kw // 2
    elif padding == "valid":
        pad_h = pad_w = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xh = x.data.transpose(0, 2, 3, 1)
    out, cols = _conv_nhwc(xh, kernel.data, pad_h, pad_w)

    def grad(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gk = (cols.T @ gh.reshape(-1, o)).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx, _ = _conv_nhwc(gh, flipped, kh - 1 - pad_h, kw - 1 - pad_w)
        return gx.transpose(0, 3, 1, 2), gk

    result = _make(out.transpose(0, 3, 1, 2), (x, kernel), grad, "conv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def window_count(mask, kh, kw):
    """Number of ones of ``mask`` inside each (kh, kw) window, same-padded.

    Works on any array whose last two axes are spatial; exact for binary input.
    """
    mask = np.asarray(mask, dtype=_dtype)
    width = [(0, 0)] * (mask.ndim - 2) + [(kh // 2, kh // 2), (kw // 2, kw // 2)]
    win = sliding_window_view(np.pad(mask, width), (kh, kw), axis=(-2, -1))
    return win.sum(axis=(-2, -1), dtype=np.float64).astype(_dtype)


# ---------------------------------------------------------------- pooling / resampling


def maxpool2d(x, mask=None):
    """2x2 max pooling with stride 2 over NCHW input with even spatial extents.

    With a ``mask`` (broadcastable to ``x``), unobserved entries are treated as
    minus infinity and windows without any observed entry produce 0.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {(h, w)}")

    def blocks(a):
        return a.reshape(a.shape[0], a.shape[1], h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(a.shape[0], a.shape[1], h // 2, w // 2, 4)

    vals = blocks(x.data)
    if mask is not None:
        observed = blocks(np.broadcast_to(np.asarray(mask, dtype=bool), x.shape))
        vals = np.where(observed, vals, -np.inf)
        any_obs = observed.any(axis=-1)
    arg = np.argmax(vals, axis=-1)
    out = np.take_along_axis(vals, arg[..., None], axis=-1)[..., 0]
    if mask is not None:
        out = np.where(any_obs, out, 0.0)

    def grad(g):
        if mask is not None:
            g = g * any_obs
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=_dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        return (routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out.astype(_dtype), (x,), grad, "maxpool2d")


def upsample2x_nearest(x):
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def grad(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1)),)

    return _make(out, (x,), grad, "upsample2x")


# ---------------------------------------------------------------- sampling


class SeededRng:
    """Counter-based (Philox) random stream; same seed and call order give the same draws."""

    def __init__(self, seed, *keys):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence([self.seed, *self.keys]) if self.keys else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys):
        """An independent stream derived from this one's seed and ``keys``."""
        return SeededRng(self.seed, *self.keys, *keys)

    def normal(self, shape):
        return self._gen.standard_normal(shape, dtype=_dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, keys={self.keys})"


def gaussian_sample(mu, logvar, rng):
    """Reparameterized draw ``mu + exp(logvar / 2) * eps``; ``rng=None`` forces eps = 0."""
    if rng is None:
        return mu
    eps = rng.normal(mu.shape)
    return add(mu, mul(exp(mul(logvar, 0.5)), eps))


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; moment estimates persist across :meth:`step` calls."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(_dtype)
