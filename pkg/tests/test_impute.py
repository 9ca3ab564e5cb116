import numpy as np
import pytest

from sparsesub import tensor as T
from sparsesub.errors import NoMissingPixelsError
from sparsesub.impute import (
    impute,
    impute_conditional_mean,
    impute_samples,
    missing_pixel_mse,
    per_image_mse,
)
from sparsesub.linear import LinearModel, impute_linear
from sparsesub.model import ModelConfig, SubspaceModel


def small_model(variant="conv-sparse", seed=0, sigma2=0.1):
    cfg = ModelConfig(variant=variant, image_shape=(12, 12), latent_dim=4, latent_channels=2, n_blocks=2,
                      channels=(3, 4), sigma2=sigma2)
    return SubspaceModel(cfg, T.SeededRng(seed))


def constant_decoder(model, value):
    model.params["dec.out.kernel"].data[:] = 0
    model.params["dec.out.bias"].data[:] = value
    return model


# ---------------------------------------------------------------- conditional mean


@pytest.mark.parametrize("variant", ["conv-sparse", "conv-fc-sparse"])
def test_zero_noise_equals_decoded_mean(variant, sparse_batch):
    values, masks, _ = sparse_batch
    model = small_model(variant)
    out = impute_conditional_mean(model, values, masks, k=10, rng=None)
    with T.no_grad():
        ref = model.decode(model.encode(values, masks).mu).data
    assert np.array_equal(out, ref)
    assert np.array_equal(impute_conditional_mean(model, values, masks, mean_mode=True), ref)


def test_estimator_variance_shrinks_like_one_over_k(sparse_batch):
    values, masks, _ = sparse_batch
    model = small_model()
    # widen the posterior so the Monte-Carlo spread is well above rounding
    model.params["enc.logvar.bias"].data[:] = 0.5
    ks = np.array([1, 4, 16, 64])
    variances = []
    for k in ks:
        estimates = np.stack([impute_conditional_mean(model, values[:1], masks[:1], k=int(k),
                                                      rng=T.SeededRng(100 + r, int(k)))
                              for r in range(40)])
        variances.append(estimates.var(axis=0).mean())
    slope = np.polyfit(np.log(ks), np.log(variances), 1)[0]
    assert -1.3 <= slope <= -0.7, (slope, variances)


def test_conditional_mean_seeded(sparse_batch):
    values, masks, _ = sparse_batch
    model = small_model()
    a = impute_conditional_mean(model, values, masks, k=3, rng=T.SeededRng(1))
    b = impute_conditional_mean(model, values, masks, k=3, rng=T.SeededRng(1))
    assert np.array_equal(a, b)


def test_conditional_mean_batching_consistent(sparse_batch):
    values, masks, _ = sparse_batch
    model = small_model()
    full = impute_conditional_mean(model, values, masks, k=0)
    split = impute_conditional_mean(model, values, masks, k=0, batch_size=3)
    assert np.abs(full - split).max() < 1e-6


def test_linear_models_dispatch(rng):
    model = LinearModel(rng.standard_normal((16, 2)), rng.standard_normal(16), 0.1)
    values = rng.random((3, 4, 4))
    masks = (rng.random((3, 4, 4)) < 0.5).astype(np.float32)
    out = impute_conditional_mean(model, values, masks)
    assert np.allclose(out, impute_linear(model, values, masks), atol=1e-6)


def test_observed_residual_reported(sparse_batch):
    values, masks, truth = sparse_batch
    result = impute(small_model(), values, masks, truth, k=2, rng=T.SeededRng(0))
    assert result.observed_residual is not None and np.isfinite(result.observed_residual)
    assert result.mse.shape == (4,)


# ---------------------------------------------------------------- multiple imputation


def test_deterministic_draws_identical(sparse_batch):
    values, masks, _ = sparse_batch
    model = small_model()
    draws = impute_samples(model, values, masks, 5, include_pixel_noise=True, rng=None)
    assert len(draws) == 5
    assert all(np.array_equal(d, draws[0]) for d in draws)


def test_pixel_noise_calibration(sparse_batch):
    values, masks, _ = sparse_batch
    model = constant_decoder(small_model(sigma2=0.04), 0.5)
    draws = np.stack(impute_samples(model, values[:1], masks[:1], 1000, include_pixel_noise=True,
                                    rng=T.SeededRng(3)))
    std = draws.std(axis=0)
    assert np.abs(std / 0.2 - 1).max() < 0.1
    assert abs(draws.mean() - 0.5) < 0.01


def test_draws_without_pixel_noise_are_decoder_outputs(sparse_batch):
    values, masks, _ = sparse_batch
    model = constant_decoder(small_model(), 0.25)
    draws = impute_samples(model, values, masks, 3, include_pixel_noise=False, rng=T.SeededRng(0))
    assert all(np.allclose(d, 0.25, atol=1e-7) for d in draws)


def test_draws_seed_deterministic(sparse_batch):
    values, masks, _ = sparse_batch
    model = small_model()
    a = impute_samples(model, values, masks, 4, True, T.SeededRng(8))
    b = impute_samples(model, values, masks, 4, True, T.SeededRng(8))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_draw_count_validated(sparse_batch):
    values, masks, _ = sparse_batch
    with pytest.raises(ValueError):
        impute_samples(small_model(), values, masks, 0, False, None)


def test_impute_collects_draws(sparse_batch):
    values, masks, truth = sparse_batch
    result = impute(small_model(), values, masks, truth, k=1, rng=T.SeededRng(0), n_draws=3)
    assert len(result.samples) == 3


# ---------------------------------------------------------------- metric


def test_mse_perfect_imputation(rng):
    truth = rng.random((2, 3, 3))
    assert missing_pixel_mse(truth, truth, rng.random((2, 3, 3)) < 0.5) == 0.0


def test_mse_hand_example():
    assert missing_pixel_mse([9.0, 0.0], [0.0, 2.0], [1.0, 0.0]) == 4.0


def test_mse_loop_oracle(rng):
    imputed, truth = rng.random((3, 5, 4)), rng.random((3, 5, 4))
    mask = (rng.random((3, 5, 4)) < 0.3).astype(float)
    total, count = 0.0, 0
    for i in range(3):
        for r in range(5):
            for c in range(4):
                if mask[i, r, c] == 0:
                    total += (imputed[i, r, c] - truth[i, r, c]) ** 2
                    count += 1
    assert missing_pixel_mse(imputed, truth, mask) == pytest.approx(total / count, rel=1e-14)


def test_mse_ignores_observed_pixels(rng):
    imputed, truth = rng.random((2, 4, 4)), rng.random((2, 4, 4))
    mask = rng.random((2, 4, 4)) < 0.5
    pasted = np.where(mask, truth, imputed)
    assert missing_pixel_mse(pasted, truth, mask) == missing_pixel_mse(imputed, truth, mask)


def test_mse_full_mask_raises():
    with pytest.raises(NoMissingPixelsError):
        missing_pixel_mse(np.zeros(4), np.zeros(4), np.ones(4))


def test_per_image_mse(rng):
    imputed, truth = rng.random((3, 4, 4)), rng.random((3, 4, 4))
    mask = (rng.random((3, 4, 4)) < 0.5).astype(float)
    mask[2] = 1
    out = per_image_mse(imputed, truth, mask)
    for i in range(2):
        assert out[i] == pytest.approx(missing_pixel_mse(imputed[i], truth[i], mask[i]))
    assert np.isnan(out[2])
