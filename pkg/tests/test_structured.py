import numpy as np
import pytest
import torch

from hdn.inference import sample_denoised
from hdn.model import LayerMode
from hdn.structured import (LayerModeSpec, autocorrelation, background_mask, denoise_deactivated,
                            high_frequency_fraction, noise_residual, stripe_correlation,
                            visualize_layer)


def test_spec_parsing():
    spec = LayerModeSpec.parse("3-6", 6)
    assert spec.modes == [LayerMode.PRIOR_SAMPLE] * 2 + [LayerMode.POSTERIOR] * 4
    assert str(spec) == "3-6"
    assert LayerModeSpec.parse("1-n", 4).modes == [LayerMode.POSTERIOR] * 4
    assert LayerModeSpec.parse("2-3", 3, prior_mean=True).modes[0] == LayerMode.PRIOR_MEAN


@pytest.mark.parametrize("text", ["3", "0-6", "2-5", "a-b", "7-6"])
def test_spec_errors(text):
    with pytest.raises(ValueError):
        LayerModeSpec.parse(text, 6)


def test_full_spec_equals_sampling(small_model, rng):
    x = rng.uniform(0, 10, (16, 16))
    a = denoise_deactivated(small_model, x, "1-3", k=3, seed=9)
    b = sample_denoised(small_model, x, k=3, seed=9)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_all_prior_spec_rejected(small_model):
    spec = LayerModeSpec(first=4, n_layers=3)
    with pytest.raises(ValueError, match="generate"):
        denoise_deactivated(small_model, np.zeros((16, 16)), spec, k=1)


def test_deactivated_layers_ignore_input_below_top(small_model, rng):
    # with only the top layer reading x, two inputs that agree on what the top
    # layer sees produce the same lower-layer prior draws
    x1 = rng.uniform(0, 10, (16, 16))
    x2 = x1.copy()
    a = denoise_deactivated(small_model, x1, "3-3", k=2, seed=1)
    b = denoise_deactivated(small_model, x2, "3-3", k=2, seed=1)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_visualize_grid_shape(small_model):
    grid = visualize_layer(small_model, 2, n_variants=6, seed=0, dims=(16, 16))
    assert grid.shape == (16, 96)


def test_visualize_repeatable_with_fixed_layer_noise(small_model):
    noise = torch.randn(4, 2, 8, 8, generator=torch.Generator().manual_seed(0))
    a = visualize_layer(small_model, 2, 4, seed=1, dims=(16, 16), layer_noise=noise)
    b = visualize_layer(small_model, 2, 4, seed=1, dims=(16, 16), layer_noise=noise)
    np.testing.assert_array_equal(a, b)


def test_visualize_top_layer_varies(small_model):
    images = visualize_layer(small_model, 3, 6, seed=0, dims=(16, 16), return_grid=False)
    assert np.var(np.stack(images), axis=0).mean() > 0


def test_visualize_range_check(small_model):
    with pytest.raises(ValueError):
        visualize_layer(small_model, 4)


def test_autocorrelation_normalised_and_symmetric(rng):
    c = autocorrelation(rng.normal(size=(64, 64)), 10)
    assert c[10, 10] == 1.0
    np.testing.assert_array_equal(c, c[::-1, ::-1])


def test_autocorrelation_iid_confidence_band():
    r = np.random.default_rng(0).normal(size=(512, 512))
    c = autocorrelation(r, 16)
    off = np.delete(c.ravel(), c.size // 2)
    assert np.abs(off).max() < 4 / 512


def test_autocorrelation_constant_rows():
    rows = np.random.default_rng(1).normal(size=(64, 1))
    c = autocorrelation(np.repeat(rows, 64, axis=1), 16)
    np.testing.assert_allclose(c[16, :], 1.0, atol=1e-9)


def test_autocorrelation_matches_direct_sum(rng):
    r = rng.normal(size=(12, 10))
    c = autocorrelation(r, 3)
    rc = r - r.mean()
    var = (rc ** 2).mean()
    for dy in range(-3, 4):
        for dx in range(-3, 4):
            a = rc[max(0, -dy):12 - max(0, dy), max(0, -dx):10 - max(0, dx)]
            b = rc[max(0, dy):12 + min(0, dy), max(0, dx):10 + min(0, dx)]
            assert c[3 + dy, 3 + dx] == pytest.approx((a * b).mean() / var, abs=1e-10)


def test_autocorrelation_errors():
    with pytest.raises(ValueError):
        autocorrelation(np.ones((16, 16)), 4)
    with pytest.raises(ValueError):
        autocorrelation(np.zeros((16, 16)) + np.eye(16), 8)


def test_background_residual(rng):
    img = np.full((32, 32), 100.0) + rng.normal(size=(32, 32))
    img[:16] = 5 + rng.normal(size=(16, 32))
    resid, mask = noise_residual(img)
    assert mask.sum() == pytest.approx(0.1 * 32 * 32, abs=2)
    assert np.all(img[mask] < 50)
    c = autocorrelation(resid, 4, mask=mask)
    assert c[4, 4] == 1.0
    gt_resid, none = noise_residual(img, gt=img)
    assert none is None and np.all(gt_resid == 0)
    assert background_mask(img, 0.5).sum() == 512


def test_stripe_correlation_axis():
    rows = np.random.default_rng(2).normal(size=(64, 1))
    stripes = np.repeat(rows, 64, axis=1)
    assert stripe_correlation(stripes, 8, axis=1) == pytest.approx(1.0)
    assert abs(stripe_correlation(stripes, 8, axis=0)) < 0.3


def test_high_frequency_fraction():
    yy, xx = np.mgrid[:32, :32]
    low = [np.cos(2 * np.pi * xx / 32 * k) for k in (1, 2)]
    high = [np.cos(2 * np.pi * xx / 32 * k) for k in (10, 12)]
    assert high_frequency_fraction(low) < 0.01
    assert high_frequency_fraction(high) > 0.99
