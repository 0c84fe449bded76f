import numpy as np
import pytest

from core.diffusion import (
    SamplerConfig,
    alpha_sigma,
    forward_noise,
    posterior_coefficients,
    posterior_step,
    predict_x0,
    repaint_densify,
    sample,
    training_loss,
    transition,
)
from core.errors import ConfigError, DimensionError, NumericError
from core.range_codec import MASK_KINDS, make_mask
from core.tensor import Tensor


def oracle_for(x):
    """A denoiser that knows the clean image and reports the exact noise."""

    def denoiser(x_t, t, text=None):
        a, s = alpha_sigma(t)
        return (x_t - a * x) / s

    return denoiser


def zero_denoiser(x_t, t, text=None):
    return np.zeros_like(x_t)


def test_schedule_identities():
    for t in np.linspace(0.0, 1.0, 1000):
        a, s = alpha_sigma(t)
        assert abs(a * a + s * s - 1.0) < 1e-12
    assert alpha_sigma(0.0) == (1.0, 0.0)
    assert alpha_sigma(1.0) == (0.0, 1.0)
    a, s = alpha_sigma(0.5)
    assert abs(a - np.sqrt(2) / 2) < 1e-15 and abs(s - np.sqrt(2) / 2) < 1e-15


def test_schedule_rejects_times_outside_the_unit_interval():
    with pytest.raises(ConfigError):
        alpha_sigma(1.5)
    with pytest.raises(ConfigError):
        transition(0.3, 0.3)


def test_transition_composes_the_marginals():
    t, s = 0.7, 0.4
    a_ts, var_ts = transition(t, s)
    a_t, s_t = alpha_sigma(t)
    a_s, s_s = alpha_sigma(s)
    assert a_ts * a_s == pytest.approx(a_t, abs=1e-15)
    assert var_ts + a_ts**2 * s_s**2 == pytest.approx(s_t**2, abs=1e-15)
    c_t, c_x, var = posterior_coefficients(t, s)
    assert var >= 0.0 and c_t > 0.0 and c_x > 0.0


def test_transition_variance_is_never_negative(rng):
    t = rng.uniform(1e-6, 1.0, 10**5)
    s = t * rng.uniform(0.0, 1.0, 10**5)
    worst = 0.0
    for ti, si in zip(t, s):
        a_ts, var_ts = transition(ti, si)
        a_t, s_t = alpha_sigma(ti)
        _, s_s = alpha_sigma(si)
        assert var_ts >= 0.0
        worst = min(worst, s_t * s_t - a_ts * a_ts * s_s * s_s)
    # the unclamped value only dips below zero by rounding
    assert worst > -1e-12


def test_posterior_mean_reproduces_alpha_s(rng):
    for t, u in rng.uniform(0.0, 1.0, (100, 2)):
        t = max(t, 1e-3)
        s = t * u
        c_t, c_x, var = posterior_coefficients(t, s)
        a_t, s_t = alpha_sigma(t)
        a_s, s_s = alpha_sigma(s)
        _, var_ts = transition(t, s)
        assert c_t * a_t + c_x == pytest.approx(a_s, abs=1e-12)
        assert var == pytest.approx(var_ts * s_s * s_s / (s_t * s_t), abs=1e-12)
        assert var >= 0.0


def test_forward_noise_mean_and_spread(rng):
    count = 20000
    x = np.full(count, 0.6)
    a_t, s_t = alpha_sigma(0.3)
    x_t = forward_noise(x, 0.3, rng.standard_normal(count))
    assert abs(x_t.mean() - a_t * 0.6) < 4.0 * s_t / np.sqrt(count)
    assert x_t.std() == pytest.approx(s_t, rel=0.05)


def test_forward_noise_and_prediction_invert(rng):
    x = rng.uniform(-1, 1, (4, 8, 2))
    eps = rng.standard_normal(x.shape)
    x_t = forward_noise(x, 0.3, eps)
    np.testing.assert_allclose(predict_x0(x_t, eps, 0.3), x, atol=1e-12)
    with pytest.raises(DimensionError):
        forward_noise(x, 0.3, eps[:2])


def test_prediction_refuses_vanishing_alpha(rng):
    x = rng.standard_normal((2, 2, 2))
    with pytest.raises(NumericError):
        predict_x0(x, x, 1.0)
    # the posterior step itself falls back to a zero estimate
    assert np.all(posterior_step(x, x, 1.0, 0.0) == 0.0)


def test_perfect_denoiser_recovers_the_image(rng):
    x = rng.uniform(-1.0, 1.0, (32, 256, 2))
    out = sample(oracle_for(x), SamplerConfig(steps=256, seed=3), x.shape)
    assert np.abs(out - x).max() < 1e-6


def test_single_step_sampling_returns_the_zero_estimate():
    out = sample(zero_denoiser, SamplerConfig(steps=1), (2, 4, 2))
    assert np.all(out == 0.0)


def test_sampling_is_deterministic_per_seed():
    shape = (4, 8, 2)
    first = sample(zero_denoiser, SamplerConfig(steps=8, seed=11), shape)
    again = sample(zero_denoiser, SamplerConfig(steps=8, seed=11), shape)
    other = sample(zero_denoiser, SamplerConfig(steps=8, seed=12), shape)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)
    assert first.min() >= -1.0 and first.max() <= 1.0


def test_sampler_grid_and_validation():
    grid = SamplerConfig(steps=4).grid()
    assert grid == [(1.0, 0.75), (0.75, 0.5), (0.5, 0.25), (0.25, 0.0)]
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(resample_n=0)


def test_training_loss_is_the_noise_error(rng):
    x = rng.uniform(-1, 1, (4, 8, 2))
    eps = rng.standard_normal(x.shape)
    loss = training_loss(zero_denoiser, x, 0.4, eps)
    assert isinstance(loss, Tensor)
    assert loss.item() == pytest.approx(float((eps**2).mean()), rel=1e-12)
    with pytest.raises(DimensionError):
        training_loss(lambda x_t, t, c: np.zeros((2, 2, 2)), x, 0.4, eps)


@pytest.mark.parametrize("kind", MASK_KINDS)
@pytest.mark.parametrize("resample_n", [1, 2])
def test_repaint_keeps_known_pixels_bit_exact(rng, small_sensor, kind, resample_n):
    known = rng.uniform(-1, 1, (small_sensor.height, small_sensor.width, 2))
    mask = make_mask(kind, small_sensor, seed=2)
    cfg = SamplerConfig(steps=6, seed=4, resample_n=resample_n)
    dense = repaint_densify(zero_denoiser, known, mask, cfg)
    assert np.array_equal(dense[mask], known[mask])
    assert dense.min() >= -1.0 and dense.max() <= 1.0


def test_repaint_with_a_perfect_denoiser_fills_the_holes(rng, small_sensor):
    known = rng.uniform(-1, 1, (small_sensor.height, small_sensor.width, 2))
    mask = make_mask("beam_keep_half", small_sensor)
    dense = repaint_densify(oracle_for(known), known, mask, SamplerConfig(steps=32, seed=1))
    np.testing.assert_allclose(dense, known, atol=1e-6)


def test_repaint_edge_masks(rng, small_sensor):
    known = rng.uniform(-1, 1, (small_sensor.height, small_sensor.width, 2))
    full = np.ones(known.shape[:2], bool)
    assert np.array_equal(repaint_densify(zero_denoiser, known, full, SamplerConfig(steps=4)), known)

    cfg = SamplerConfig(steps=5, seed=9)
    empty = repaint_densify(zero_denoiser, known, ~full, cfg)
    assert np.array_equal(empty, sample(zero_denoiser, cfg, known.shape))
    with pytest.raises(DimensionError):
        repaint_densify(zero_denoiser, known, full[:4], cfg)
