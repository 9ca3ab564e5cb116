import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesub import tensor as T
from sparsesub.layers import (
    SparseSample,
    fill_interp,
    fill_mean,
    fill_zero,
    masked_maxpool,
    pad_to_even,
    propagate_mask,
    sparse_conv2d,
    sparse_conv_1d_response,
    sparse_fc_forward,
)

from conftest import gradcheck
from oracles import row_deletion_posterior


def param(a, name="p"):
    return T.Parameter(np.asarray(a, np.float32), name)


def loop_sparse_conv(x, m, k):
    """Per-pixel evaluation of the local-normalized sparse convolution, one channel in and out."""
    h, w = x.shape
    kh, kw = k.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = taps = seen = 0.0
            for u in range(kh):
                for v in range(kw):
                    y, z = i + u - kh // 2, j + v - kw // 2
                    if 0 <= y < h and 0 <= z < w:
                        taps += 1
                        seen += m[y, z]
                        acc += m[y, z] * x[y, z] * k[u, v]
            out[i, j] = taps / seen * acc if seen else 0.0
    return out


# ---------------------------------------------------------------- SparseSample


def test_sparse_sample_rejects_values_off_mask():
    with pytest.raises(ValueError):
        SparseSample(np.array([1.0, 2.0]), np.array([1.0, 0.0]))


def test_sparse_sample_from_image_keeps_truth():
    s = SparseSample.from_image(np.array([3.0, 4.0]), np.array([0.0, 1.0]))
    assert s.values.tolist() == [0.0, 4.0] and s.ground_truth.tolist() == [3.0, 4.0]


# ---------------------------------------------------------------- sparse FC


def test_fc_single_observed_row():
    r = sparse_fc_forward(np.array([[1.0], [0.0]], np.float32), np.zeros(2, np.float32),
                          np.array([3.0, 7.0], np.float32), np.array([1, 0]), ridge=1e-12)
    assert r.data == pytest.approx([3.0], abs=1e-6)


def test_fc_full_mask_orthonormal_projection(rng):
    q, _ = np.linalg.qr(rng.standard_normal((8, 3)))
    y = rng.standard_normal(8).astype(np.float32)
    r = sparse_fc_forward(q.astype(np.float32), np.zeros(8, np.float32), y, np.ones(8), ridge=1e-9)
    np.testing.assert_allclose(r.data, q.T @ y, atol=1e-5)


def test_fc_uninformative_row_gives_zero():
    r = sparse_fc_forward(np.array([[1.0], [0.0]], np.float32), np.zeros(2, np.float32),
                          np.array([0.0, 7.0], np.float32), np.array([0, 1]), ridge=1e-5)
    assert r.data.tolist() == [0.0]


def test_fc_no_observed_pixels_gives_zero(rng):
    r = sparse_fc_forward(rng.standard_normal((6, 2)).astype(np.float32), np.ones(6, np.float32),
                          np.zeros(6, np.float32), np.zeros(6))
    assert np.array_equal(r.data, np.zeros(2))


def test_fc_matches_row_deletion_oracle(rng):
    W = rng.standard_normal((20, 4)).astype(np.float32)
    mu = rng.standard_normal(20).astype(np.float32)
    m = (rng.random(20) < 0.4).astype(np.float32)
    y = rng.standard_normal(20).astype(np.float32) * m
    r = sparse_fc_forward(W, mu, y, m, ridge=1e-5)
    assert np.abs(r.data - row_deletion_posterior(W, mu, y, m, 1e-5)[0]).max() < 1e-5


def test_fc_batch_equals_per_sample(rng):
    W = rng.standard_normal((10, 3)).astype(np.float32)
    mu = rng.standard_normal(10).astype(np.float32)
    m = (rng.random((5, 10)) < 0.5).astype(np.float32)
    y = rng.standard_normal((5, 10)).astype(np.float32) * m
    batch = sparse_fc_forward(W, mu, y, m).data
    for i in range(5):
        np.testing.assert_allclose(batch[i], sparse_fc_forward(W, mu, y[i], m[i]).data, atol=1e-6)


def test_fc_permutation_bit_identical(rng):
    W = rng.standard_normal((30, 5)).astype(np.float32)
    mu = rng.standard_normal(30).astype(np.float32)
    m = (rng.random((6, 30)) < 0.5).astype(np.float32)
    y = rng.standard_normal((6, 30)).astype(np.float32) * m
    perm = rng.permutation(30)
    a = sparse_fc_forward(W, mu, y, m).data
    b = sparse_fc_forward(W[perm], mu[perm], y[:, perm], m[:, perm]).data
    assert np.array_equal(a, b)


def test_fc_rejects_nonpositive_ridge(rng):
    with pytest.raises(ValueError):
        sparse_fc_forward(np.ones((3, 1), np.float32), np.zeros(3, np.float32), np.zeros(3, np.float32), np.ones(3), 0.0)


def test_fc_gradients(rng):
    W = param(rng.standard_normal((9, 3)), "W")
    mu = param(rng.standard_normal(9) * 0.1, "mu")
    m = (rng.random((4, 9)) < 0.6).astype(np.float32)
    m[:, :3] = 1
    y = param(rng.standard_normal((4, 9)) * m, "y")
    assert gradcheck(lambda: sparse_fc_forward(W, mu, y, m, ridge=1e-2), [W, mu]) < 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(1, 5), st.floats(0.1, 0.9), st.integers(0, 2**31 - 1))
def test_fc_oracle_property(D, d, keep, seed):
    r = np.random.default_rng(seed)
    d = min(d, D)
    W = r.standard_normal((D, d)).astype(np.float32)
    mu = r.standard_normal(D).astype(np.float32)
    m = (r.random(D) < keep).astype(np.float32)
    y = r.standard_normal(D).astype(np.float32) * m
    oracle = row_deletion_posterior(W, mu, y, m, 1e-3)[0]
    got = sparse_fc_forward(W, mu, y, m, ridge=1e-3).data
    assert np.abs(got - oracle).max() < 1e-5 * max(1.0, np.abs(oracle).max())


# ---------------------------------------------------------------- sparse conv


def test_sparse_conv_hand_case():
    out, new_mask = sparse_conv_1d_response([2.0, 0.0, 4.0], [1, 0, 1], [1.0, 1.0, 1.0])
    assert out[1] == pytest.approx(9.0)
    assert new_mask.tolist() == [1, 1, 1]


def test_sparse_conv_full_mask_equals_conv(rng):
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out, m = sparse_conv2d(T.Tensor(x), np.ones((2, 1, 9, 9), np.float32), T.Tensor(k))
    dense = T.conv2d(x, k).data
    assert np.abs(out.data - dense)[..., 1:-1, 1:-1].max() < 1e-5
    assert m.all()


def test_sparse_conv_empty_mask_gives_zeros(rng):
    x = T.Tensor(np.zeros((1, 1, 6, 6), np.float32))
    out, m = sparse_conv2d(x, np.zeros((1, 1, 6, 6), np.float32), T.Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32)),
                           T.Tensor(np.ones(2, np.float32)))
    assert not out.data.any() and not m.any()


def test_sparse_conv_loop_oracle(rng):
    x = rng.standard_normal((8, 8)).astype(np.float32)
    m = (rng.random((8, 8)) < 0.5).astype(np.float32)
    k = rng.standard_normal((3, 3)).astype(np.float32)
    out, _ = sparse_conv2d(T.Tensor((x * m)[None, None]), m[None, None], T.Tensor(k[None, None]))
    assert np.abs(out.data[0, 0] - loop_sparse_conv(x, m, k)).max() < 1e-5


def test_sparse_conv_ignores_unobserved_values(rng):
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    m = (rng.random((1, 1, 6, 6)) < 0.5).astype(np.float32)
    k = T.Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
    a, _ = sparse_conv2d(T.Tensor(x), m, k)
    b, _ = sparse_conv2d(T.Tensor(x + (1 - m) * 100.0), m, k)
    assert np.array_equal(a.data, b.data)


def test_sparse_conv_bias_only_where_mask_propagates():
    m = np.zeros((1, 1, 5, 5), np.float32)
    m[0, 0, 0, 0] = 1
    out, new_mask = sparse_conv2d(T.Tensor(np.zeros((1, 1, 5, 5), np.float32)), m,
                                  T.Tensor(np.zeros((1, 1, 3, 3), np.float32)), T.Tensor(np.array([2.0], np.float32)))
    np.testing.assert_array_equal(out.data[0, 0], 2.0 * new_mask[0, 0])


def test_sparse_conv_gradients(rng):
    x = param(rng.standard_normal((2, 2, 6, 5)), "x")
    m = (rng.random((2, 1, 6, 5)) < 0.5).astype(np.float32)
    k = param(rng.standard_normal((3, 2, 3, 3)) * 0.3, "k")
    b = param(rng.standard_normal(3), "b")
    assert gradcheck(lambda: sparse_conv2d(x, m, k, b)[0], [x, k, b]) < 1e-3


# ---------------------------------------------------------------- mask propagation


def test_propagate_reaches_one_tap():
    assert propagate_mask(np.array([1.0, 0.0, 0.0]), 3).tolist() == [1, 1, 0]


def test_propagate_saturated_and_empty():
    assert propagate_mask(np.ones((4, 4)), 3).all()
    assert not propagate_mask(np.zeros((4, 4)), 3).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_propagate_monotone_and_saturates(seed):
    r = np.random.default_rng(seed)
    small = (r.random((1, 1, 9, 9)) < 0.1).astype(np.float32)
    big = np.maximum(small, (r.random((1, 1, 9, 9)) < 0.2).astype(np.float32))
    assert np.all(propagate_mask(big, 3) >= propagate_mask(small, 3))
    if small.any():
        m = small
        for _ in range(int(np.ceil(np.hypot(9, 9) / 2)) + 8):
            m = propagate_mask(m, 3)
        assert m.all()


# ---------------------------------------------------------------- pooling and padding


def test_masked_pool_ignores_unobserved():
    x = T.Tensor(np.array([[[[1.0, 5.0], [9.0, 9.0]]]], np.float32))
    v, m = masked_maxpool(x, np.array([[[[1, 1], [0, 0]]]], np.float32))
    assert v.data.item() == 5.0 and m.item() == 1


def test_masked_pool_empty_window():
    x = T.Tensor(np.full((1, 1, 2, 2), -3.0, np.float32))
    v, m = masked_maxpool(x, np.zeros((1, 1, 2, 2), np.float32))
    assert v.data.item() == 0.0 and m.item() == 0


def test_masked_pool_full_mask_equals_plain(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 6, 4)).astype(np.float32))
    v, _ = masked_maxpool(x, np.ones((2, 1, 6, 4), np.float32))
    assert np.array_equal(v.data, T.maxpool2d(x).data)


def test_masked_pool_gradients(rng):
    x = param(rng.standard_normal((2, 2, 4, 6)), "x")
    m = (rng.random((2, 1, 4, 6)) < 0.5).astype(np.float32)
    assert gradcheck(lambda: masked_maxpool(x, m)[0], [x]) < 1e-3


def test_pad_to_even_marks_padding_unobserved():
    x, m = pad_to_even(T.Tensor(np.ones((1, 1, 7, 6), np.float32)), np.ones((1, 1, 7, 6), np.float32))
    assert x.shape == (1, 1, 8, 6) and m[0, 0, 7].sum() == 0


# ---------------------------------------------------------------- fills


def test_fill_zero():
    assert fill_zero(np.array([3.0, 0.0]), np.array([1, 0])).tolist() == [3.0, 0.0]


def test_fill_mean():
    assert fill_mean(np.array([9.0, 0.0]), np.array([1, 0]), np.array([1.0, 2.0])).tolist() == [9.0, 2.0]


def test_fill_interp_row():
    np.testing.assert_allclose(fill_interp(np.array([[10.0, 0, 0, 0, 50]]), np.array([[1, 0, 0, 0, 1]])),
                               [[10, 20, 30, 40, 50]], atol=1e-5)


def test_fill_interp_empty_image_warns(caplog):
    with caplog.at_level(logging.WARNING):
        out, flag = fill_interp(np.zeros((3, 3)), np.zeros((3, 3)), return_flag=True)
    assert flag and not out.any() and "no observed" in caplog.text


def test_fill_interp_keeps_observed(rng):
    img = rng.random((10, 10)).astype(np.float32)
    m = (rng.random((10, 10)) < 0.3).astype(np.float32)
    out = fill_interp(img * m, m)
    assert np.array_equal(out[m > 0], img[m > 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(2, 16), st.floats(0.05, 0.9), st.integers(0, 2**31 - 1))
def test_fill_interp_exact_on_affine_with_row_endpoints(h, w, keep, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.standard_normal(3)
    yy, xx = np.mgrid[:h, :w]
    img = (a + b * yy + c * xx).astype(np.float32)
    m = (r.random((h, w)) < keep).astype(np.float32)
    m[:, 0] = m[:, -1] = 1
    assert np.abs(fill_interp(img * m, m) - img).max() < 1e-4 * max(1.0, np.abs(img).max())
