import json
import math

import numpy as np
import pytest
from conftest import random_dag

from lcgode import autodiff as ad
from lcgode.data import SyntheticConfig, generate_synthetic_dataset, time_grid
from lcgode.graph import ArchitectureGraph, encode_architecture
from lcgode.model import (
    LCGODE,
    CurveScaler,
    ModelParams,
    OptimizerState,
    TrainConfig,
    TrainingError,
    adamw_step,
    elbo,
    extrapolate,
    extrapolate_trials,
    forward,
    init_params,
    kl_standard_normal,
    load_checkpoint,
    negative_elbo,
    predict_mean,
    prefix_of,
    save_checkpoint,
    train,
)
from lcgode.ode import OdeFuncParams, decode, integrate, vector_field
from lcgode.sequence import (
    ObservedPrefix,
    PosteriorStats,
    encode_observations,
    sample_latent,
)

TINY = SyntheticConfig(m=12, unit_range=(16, 32))


def tiny_setup(d=2, n=3, m=6, seed=0):
    config = TrainConfig(latent_dim=d, condition_length=n, seed=seed)
    params = init_params(config)
    r = np.random.default_rng(seed + 1)
    values = np.sort(r.uniform(0.2, 0.8, m))
    prefix = ObservedPrefix(values[:n], time_grid(m, 1.0)[:n])
    graph = ArchitectureGraph.from_edges(4, [(0, 1, 1), (0, 2, 2), (1, 3, 3), (2, 3, 1)], "cnn_cell")
    return config, params, values, prefix, graph


def test_forward_matches_composition_oracle():
    config, params, values, prefix, graph = tiny_setup()
    noise = np.array([0.3, -0.7])
    preds, stats = forward(prefix, graph, params, noise, horizon=6)
    ref_stats = encode_observations(prefix, params.seq)
    z0 = sample_latent(ref_stats, noise)
    z_graph = encode_architecture(graph, params.graph)
    states = integrate(vector_field(z_graph, params.ode), z0, time_grid(6, 1.0)[3:])
    ref = np.array([decode(z, params.dec) for z in states])
    assert preds.shape == (3,)
    np.testing.assert_allclose(preds, ref, rtol=0, atol=1e-14)
    np.testing.assert_allclose(stats.mu, ref_stats.mu, rtol=0, atol=1e-15)


def test_frozen_latent_gives_constant_predictions():
    config, params, values, prefix, graph = tiny_setup()
    params.ode = OdeFuncParams(*(np.zeros_like(a) for a in (params.ode.W1, params.ode.b1, params.ode.W2, params.ode.b2)))
    preds, stats = forward(prefix, graph, params, np.zeros(2), horizon=6)
    assert np.all(preds == preds[0])
    assert preds[0] == pytest.approx(float(decode(stats.mu, params.dec)), abs=1e-15)


def test_forward_deterministic_and_grid_checked():
    config, params, values, prefix, graph = tiny_setup()
    a = forward(prefix, graph, params, np.zeros(2), horizon=6)[0]
    b = forward(prefix, graph, params, np.zeros(2), horizon=6)[0]
    assert np.array_equal(a, b)
    off_grid = ObservedPrefix(prefix.values, prefix.times + 0.01)
    with pytest.raises(ValueError, match="grid"):
        forward(off_grid, graph, params, np.zeros(2), horizon=6)
    with pytest.raises(ValueError):
        forward(prefix, graph, params, np.zeros(2), horizon=3)


def test_ablation_ignores_graph():
    config, params, values, prefix, _ = tiny_setup(d=4)
    rng = np.random.default_rng(0)
    outs = [
        forward(prefix, random_dag(rng, 7), params, np.ones(4), horizon=6, ablate_graph=True)[0] for _ in range(5)
    ]
    assert all(np.array_equal(o, outs[0]) for o in outs)


def test_elbo_perfect_fit():
    config = TrainConfig(obs_noise=0.05)
    target = np.linspace(0.2, 0.8, 7)
    stats = PosteriorStats(np.zeros(3), np.ones(3))
    expected = 7 * -math.log(0.05 * math.sqrt(2 * math.pi))
    assert float(elbo(target, target, stats, config)) == pytest.approx(expected, rel=1e-14)
    assert float(kl_standard_normal(stats)) == 0.0


def test_kl_closed_form():
    stats = PosteriorStats(np.ones(4), np.ones(4))
    assert float(kl_standard_normal(stats)) == pytest.approx(2.0, abs=1e-15)


def mc_kl(mu, sigma, rng, n=100_000):
    z = mu + sigma * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + 2 * np.log(sigma) + np.log(2 * np.pi))
    log_p = -0.5 * (z**2 + np.log(2 * np.pi))
    return float(np.mean(np.sum(log_q - log_p, axis=1)))


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mu = rng.normal(size=3)
        sigma = rng.uniform(0.3, 2.0, 3)
        exact = float(kl_standard_normal(PosteriorStats(mu, sigma)))
        assert abs(mc_kl(mu, sigma, rng) - exact) <= 0.02 * exact


def test_adamw_examples():
    state = OptimizerState.zeros_like({"t": np.ones(2)})
    out = adamw_step({"t": np.ones(2)}, {"t": np.zeros(2)}, state, 0.001, 0.0)
    np.testing.assert_array_equal(out["t"], np.ones(2))

    state = OptimizerState.zeros_like({"t": np.array(1.0)})
    out = adamw_step({"t": np.array(1.0)}, {"t": np.array(0.5)}, state, 0.001, 0.0)
    # m_hat = g, v_hat = g^2 -> step is lr * g / (|g| + eps)
    assert float(out["t"]) == pytest.approx(1.0 - 0.001 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    assert round(float(out["t"]), 4) == 0.9990

    state = OptimizerState.zeros_like({"t": np.array(1.0)})
    out = adamw_step({"t": np.array(1.0)}, {"t": np.array(0.0)}, state, 0.001, 0.01)
    assert float(out["t"]) == pytest.approx(1.0 - 1e-5, abs=1e-15)


def test_adamw_shape_mismatch():
    state = OptimizerState.zeros_like({"t": np.ones(2)})
    with pytest.raises(ValueError):
        adamw_step({"t": np.ones(2)}, {"t": np.ones(3)}, state, 0.1, 0.0)


def test_full_elbo_gradient():
    config, params, values, prefix, graph = tiny_setup(m=8)
    config = TrainConfig(latent_dim=2, condition_length=3, decoder_hidden=0)
    noise = np.array([[0.4, -0.2]])
    times = time_grid(8, 1.0)
    batch = values[None, :]

    def fn(tape, v):
        return negative_elbo(ModelParams.from_arrays(v, config.pooling), batch, times, [graph.quotient], noise, config)

    assert ad.grad_check(fn, params.arrays()) < 1e-4


def test_kl_weight_regularizes_monotonically():
    # one-step toy: yhat = z, z = mu + sigma * eps; expected loss is closed form in (mu, log sigma)
    y, s = 1.5, 0.5
    kls = []
    for w in (0.25, 0.5, 1.0, 2.0, 4.0):
        theta = {"mu": np.zeros(1), "ls": np.zeros(1)}
        state = OptimizerState.zeros_like(theta)
        for _ in range(3000):
            tape = ad.Tape()
            v = tape.bind(theta)
            sigma = ad.exp(v["ls"])
            recon = ad.div(ad.add(ad.square(ad.sub(v["mu"], y)), ad.square(sigma)), 2 * s * s)
            loss = ad.sum(ad.add(recon, ad.mul(w, kl_standard_normal(PosteriorStats(v["mu"], sigma)))))
            theta = adamw_step(theta, ad.backward(tape, loss), state, 0.01, 0.0)
        mu, sigma = float(theta["mu"][0]), math.exp(float(theta["ls"][0]))
        assert mu == pytest.approx(y / (1 + w * s * s), abs=1e-3)
        kls.append(0.5 * (mu * mu + sigma * sigma - 1 - 2 * math.log(sigma)))
    assert all(a >= b for a, b in zip(kls, kls[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(metric="f1")
    with pytest.raises(ValueError):
        TrainConfig(latent_dim=0)
    assert TrainConfig.from_dict({"latent_dim": 4, "unknown": 1}).latent_dim == 4


def test_scaler_roundtrip():
    values = np.exp(np.random.default_rng(0).normal(size=(5, 7)))
    s = CurveScaler.fit("test_loss", values)
    np.testing.assert_allclose(s.inverse(s.transform(values)), values, rtol=1e-14)
    acc = CurveScaler.fit("test_accuracy", values)
    assert np.array_equal(acc.transform(values), values)


@pytest.fixture(scope="module")
def small_run():
    trials = generate_synthetic_dataset(8, 0, TINY)
    config = TrainConfig(latent_dim=4, condition_length=4, epochs=100, batch_size=4, seed=3, patience=1000)
    return trials, config, train(trials, config)


def test_training_reduces_loss(small_run):
    _, _, model = small_run
    assert len(model.log) == 100
    assert model.log[-1]["train_loss"] < model.log[0]["train_loss"]


def test_training_is_reproducible(small_run):
    trials, config, model = small_run
    again = train(trials, config)
    a, b = model.params.arrays(), again.params.arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert model.log == again.log


def test_ablation_training_runs():
    trials = generate_synthetic_dataset(8, 0, TINY)
    config = TrainConfig(latent_dim=3, condition_length=4, epochs=5, ablate_graph=True)
    model = train(trials, config)
    assert len(model.log) == 5 and model.config.ablate_graph


def test_loss_metric_training():
    trials = generate_synthetic_dataset(8, 0, TINY)
    config = TrainConfig(latent_dim=3, condition_length=4, epochs=5, metric="test_loss")
    model = train(trials, config)
    assert model.scaler.metric == "test_loss"
    assert np.all(predict_mean(model, trials) > 0)


def test_early_stopping():
    trials = generate_synthetic_dataset(8, 0, TINY)
    model = train(trials, TrainConfig(latent_dim=3, condition_length=4, epochs=200, patience=3, learning_rate=0.5))
    assert len(model.log) < 200


def test_training_errors():
    with pytest.raises(TrainingError):
        train([], TrainConfig())
    trials = generate_synthetic_dataset(4, 0, TINY)
    with pytest.raises(TrainingError):
        train(trials, TrainConfig(condition_length=12, epochs=1))


def test_extrapolate_examples(small_run):
    trials, _, model = small_run
    t = trials[0]
    prefix = prefix_of(t.curves["test_accuracy"], 4)
    mean, std = extrapolate(model, prefix, t.graph)
    assert mean.shape == (8,) and np.all(std == 0)
    mean, std = extrapolate(model, prefix, t.graph, samples=100, rng=np.random.default_rng(0))
    assert np.all(std >= 0) and np.all(np.isfinite(std))
    with pytest.raises(ValueError):
        extrapolate(model, prefix, t.graph, samples=0)


def test_monte_carlo_mean_converges(small_run):
    trials, _, model = small_run
    t = trials[1]
    prefix = prefix_of(t.curves["test_accuracy"], 4)
    ref_mean, ref_std = extrapolate(model, prefix, t.graph, samples=40_000, rng=np.random.default_rng(1))
    for k in (25, 400):
        mean, _ = extrapolate(model, prefix, t.graph, samples=k, rng=np.random.default_rng(k))
        assert np.all(np.abs(mean - ref_mean) <= 4 * ref_std / math.sqrt(k) + 1e-12)


def test_batched_and_single_extrapolation_agree(small_run):
    trials, _, model = small_run
    batched, _ = extrapolate_trials(model, trials)
    for t, row in zip(trials, batched):
        single, _ = extrapolate(model, prefix_of(t.curves["test_accuracy"], 4), t.graph)
        np.testing.assert_allclose(row, single, rtol=0, atol=1e-13)
    np.testing.assert_allclose(predict_mean(model, trials), batched, rtol=0, atol=1e-13)


def test_checkpoint_roundtrip(small_run, tmp_path):
    trials, _, model = small_run
    save_checkpoint(tmp_path / "m.json", model)
    back = load_checkpoint(tmp_path / "m.json")
    assert isinstance(back, LCGODE) and back.config == model.config and back.m == model.m
    assert np.array_equal(predict_mean(back, trials), predict_mean(model, trials))
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["format_version"] = 99
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="format_version"):
        load_checkpoint(tmp_path / "bad.json")
