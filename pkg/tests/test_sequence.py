import numpy as np
import pytest

from lcgode import autodiff as ad
from lcgode.sequence import (
    SIGMA_FLOOR,
    ObservedPrefix,
    PosteriorStats,
    SeqEncoderParams,
    encode_observations,
    gru_cell,
    init_seq_params,
    sample_latent,
)


def zero_params(d=3):
    p = init_seq_params(np.random.default_rng(0), d)
    return SeqEncoderParams(**{k.split(".", 1)[1]: np.zeros_like(v) for k, v in p.arrays().items()})


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_step(h, x, P):
    u = sig(x @ P["W_z"] + h @ P["U_z"] + P["b_z"])
    r = sig(x @ P["W_r"] + h @ P["U_r"] + P["b_r"])
    c = np.tanh(x @ P["W_h"] + (r * h) @ P["U_h"] + P["b_h"])
    return (1 - u) * h + u * c


def raw(p):
    return {k.split(".", 1)[1]: v for k, v in p.arrays().items()}


def test_zero_weight_gru_halves_state():
    h = np.array([0.4, -1.0, 2.0])
    np.testing.assert_allclose(gru_cell(h, np.ones(3), zero_params()), 0.5 * h, atol=0)


def test_saturated_candidate_is_bounded():
    p = zero_params()
    p.b_h = np.full(3, 50.0)
    p.b_z = np.full(3, 50.0)
    out = gru_cell(np.zeros(3), np.zeros(3), p)
    assert np.all(np.abs(out) <= 1.0)
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_gru_matches_oracle():
    p = init_seq_params(np.random.default_rng(3), 4)
    r = np.random.default_rng(4)
    h, x = r.normal(size=4), r.normal(size=4)
    np.testing.assert_allclose(gru_cell(h, x, p), oracle_step(h, x, raw(p)), rtol=0, atol=1e-15)


def test_zero_params_posterior():
    prefix = ObservedPrefix([0.3, 0.5], [0.1, 0.2])
    stats = encode_observations(prefix, zero_params())
    np.testing.assert_array_equal(stats.mu, np.zeros(3))
    np.testing.assert_allclose(stats.sigma, np.log(2.0) + 1e-4, rtol=1e-15)
    assert round(float(stats.sigma[0]), 4) == 0.6932


def test_no_recurrence_only_last_input_matters():
    p = init_seq_params(np.random.default_rng(1), 3)
    for k in ("U_z", "U_r", "U_h"):
        setattr(p, k, np.zeros((3, 3)))
    p.W_z = np.full((3, 3), -1e3)  # update gate fully open -> h' = candidate
    p.b_z = np.full(3, 1e6)
    one = encode_observations(ObservedPrefix([0.7], [0.1]), p)
    two = encode_observations(ObservedPrefix([0.7, 0.7], [0.05, 0.1]), p)
    np.testing.assert_allclose(one.mu, two.mu, atol=1e-15)
    np.testing.assert_allclose(one.sigma, two.sigma, atol=1e-15)


def test_ten_step_unroll_matches_oracle():
    d = 5
    p = init_seq_params(np.random.default_rng(8), d)
    P = raw(p)
    r = np.random.default_rng(9)
    y = r.uniform(size=10)
    t = np.arange(1, 11) / 60
    h = np.zeros(d)
    for yi, ti in zip(y, t):
        h = oracle_step(h, np.array([yi, ti]) @ P["W_in"] + P["b_in"], P)
    mu = h @ P["W_mu"] + P["b_mu"]
    sigma = np.log1p(np.exp(h @ P["W_sigma"] + P["b_sigma"])) + 1e-4
    stats = encode_observations(ObservedPrefix(y, t), p)
    np.testing.assert_allclose(stats.mu, mu, rtol=0, atol=1e-14)
    np.testing.assert_allclose(stats.sigma, sigma, rtol=0, atol=1e-14)


def test_initial_sigma_offset():
    # a zero hidden state maps to the configured starting sigma
    p = init_seq_params(np.random.default_rng(0), 4)
    sigma = ad.softplus(p.b_sigma) + SIGMA_FLOOR
    np.testing.assert_allclose(sigma, 0.1, rtol=1e-12)


def test_empty_prefix_rejected():
    with pytest.raises(ValueError):
        encode_observations(ObservedPrefix([], []), zero_params())


@pytest.mark.parametrize("values,times", [([1.0, 2.0], [0.2, 0.1]), ([np.nan], [0.1]), ([1.0], [0.1, 0.2])])
def test_bad_prefix_rejected(values, times):
    with pytest.raises(ValueError):
        ObservedPrefix(values, times)


def test_sigma_floor_holds_for_extreme_params():
    r = np.random.default_rng(2)
    for _ in range(20):
        p = init_seq_params(r, 3)
        p.W_sigma = r.normal(scale=50, size=(3, 3))
        p.b_sigma = np.full(3, -1e3)
        stats = encode_observations(ObservedPrefix(r.uniform(size=4), np.arange(1, 5) / 10), p)
        assert np.min(stats.sigma) >= SIGMA_FLOOR


def test_encoder_is_pure():
    p = init_seq_params(np.random.default_rng(5), 3)
    prefix = ObservedPrefix([0.1, 0.2, 0.4], [0.1, 0.2, 0.3])
    a, b = encode_observations(prefix, p), encode_observations(prefix, p)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)


def test_sample_latent_examples():
    stats = PosteriorStats(np.array([1.0, 2.0]), np.array([0.5, 1.0]))
    np.testing.assert_array_equal(sample_latent(stats, np.array([2.0, -1.0])), [2.0, 1.0])
    np.testing.assert_array_equal(sample_latent(stats, np.zeros(2)), stats.mu)
    tiny = PosteriorStats(stats.mu, np.full(2, SIGMA_FLOOR))
    noise = np.array([3.0, -2.0])
    assert np.all(np.abs(sample_latent(tiny, noise) - stats.mu) <= 1e-3 * np.abs(noise))


def test_reparameterization_moments():
    mu, sigma = np.array([0.3, -1.2, 2.0]), np.array([0.5, 1.5, 0.05])
    noise = np.random.default_rng(0).standard_normal((100_000, 3))
    z = sample_latent(PosteriorStats(mu, sigma), noise)
    assert np.all(np.abs(z.mean(axis=0) - mu) <= 0.02 * sigma)
    np.testing.assert_allclose(z.std(axis=0), sigma, rtol=0.02)


def test_sample_jacobians():
    noise = np.array([0.7, -1.3])
    tape = ad.Tape()
    mu = tape.param("mu", np.array([0.2, 0.4]))
    sigma = tape.param("sigma", np.array([0.5, 2.0]))
    z = sample_latent(PosteriorStats(mu, sigma), noise)
    for i in range(2):
        g = ad.backward(tape, ad.getitem(z, i))
        np.testing.assert_array_equal(g["mu"], np.eye(2)[i])
        np.testing.assert_array_equal(g["sigma"], np.eye(2)[i] * noise)
    err = ad.grad_check(
        lambda t, v: ad.sum(ad.square(sample_latent(PosteriorStats(v["mu"], v["sigma"]), noise))),
        {"mu": np.array([0.2, 0.4]), "sigma": np.array([0.5, 2.0])},
    )
    assert err < 1e-8


def test_encoder_gradients():
    p = init_seq_params(np.random.default_rng(6), 3)
    prefix = ObservedPrefix([0.2, 0.5, 0.6], [0.1, 0.2, 0.3])

    def fn(tape, v):
        stats = encode_observations(prefix, SeqEncoderParams.from_arrays(v))
        return ad.add(ad.sum(ad.square(stats.mu)), ad.sum(ad.log(stats.sigma)))

    assert ad.grad_check(fn, p.arrays()) < 1e-6
