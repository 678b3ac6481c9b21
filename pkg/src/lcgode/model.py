"""LC-GODE: prefix encoder + graph encoder + latent ODE + decoder.

Forward pass for one trial with condition length ``n`` and horizon ``m``::

    mu, sigma = encode(y_1..y_n, t_1..t_n)
    z_{n+1}   = mu + sigma * noise
    z_G       = encode_graph(G)            (zeros for the NODE ablation)
    z_{n+1..m} = RK4(dz/dt = f([z || z_G]), t_{n+1}..t_m)
    yhat_i    = decode(z_i)

Training minimizes the negative ELBO (Gaussian likelihood, closed-form KL to
a standard normal prior) with AdamW, keeping the parameters with the best
validation MAPE.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import METRICS, LearningCurve, Trial, time_grid
from .graph import (
    ArchitectureGraph,
    GraphEncoderParams,
    encode_quotients,
    init_graph_params,
)
from .ode import (
    DecoderParams,
    IntegrationError,
    OdeFuncParams,
    decode,
    init_decoder_params,
    init_ode_params,
    integrate,
    vector_field,
)
from .seeding import stream
from .sequence import (
    ObservedPrefix,
    PosteriorStats,
    SeqEncoderParams,
    encode_sequences,
    init_seq_params,
    sample_latent,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    latent_dim: int = 16
    learning_rate: float = 1e-3
    batch_size: int = 40
    epochs: int = 400
    condition_length: int = 10
    t_max: float = 1.0
    kl_weight: float = 1.0
    obs_noise: float = 0.05
    patience: int = 50
    seed: int = 0
    weight_decay: float = 0.01
    metric: str = "test_accuracy"
    pooling: str = "learnable"
    gcn_layers: int = 2
    decoder_hidden: int = 0
    substeps: int = 1
    ablate_graph: bool = False
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        for name in ("latent_dim", "batch_size", "condition_length", "gcn_layers", "substeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "t_max", "obs_noise"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kl_weight < 0 or self.weight_decay < 0 or self.epochs < 0 or self.patience < 1:
            raise ValueError("kl_weight, weight_decay, epochs must be >= 0 and patience >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class ModelParams:
    seq: SeqEncoderParams
    graph: GraphEncoderParams
    ode: OdeFuncParams
    dec: DecoderParams

    def arrays(self) -> dict:
        return {**self.seq.arrays(), **self.graph.arrays(), **self.ode.arrays(), **self.dec.arrays()}

    @classmethod
    def from_arrays(cls, arrays, pooling: str) -> ModelParams:
        return cls(
            SeqEncoderParams.from_arrays(arrays),
            GraphEncoderParams.from_arrays(arrays, pooling),
            OdeFuncParams.from_arrays(arrays),
            DecoderParams.from_arrays(arrays),
        )


def init_params(config: TrainConfig, seed: int | None = None) -> ModelParams:
    seed = config.seed if seed is None else seed
    d = config.latent_dim
    return ModelParams(
        init_seq_params(stream(seed, "init.seq"), d),
        init_graph_params(stream(seed, "init.graph"), (d,) * config.gcn_layers, config.pooling),
        init_ode_params(stream(seed, "init.ode"), d),
        init_decoder_params(stream(seed, "init.dec"), d, config.decoder_hidden),
    )


@dataclass
class CurveScaler:
    """Accuracy passes through; loss is log-transformed and standardized."""

    metric: str
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, metric: str, values: np.ndarray) -> CurveScaler:
        if metric == "test_accuracy":
            return cls(metric)
        logs = np.log(np.asarray(values, dtype=np.float64))
        std = float(logs.std())
        return cls(metric, float(logs.mean()), std if std > 0 else 1.0)

    def transform(self, values):
        if self.metric == "test_accuracy":
            return np.asarray(values, dtype=np.float64)
        return (np.log(values) - self.mean) / self.std

    def inverse(self, values):
        if self.metric == "test_accuracy":
            return np.asarray(values, dtype=np.float64)
        return np.exp(np.asarray(values) * self.std + self.mean)


@dataclass
class LCGODE:
    """Trained model: parameters plus everything needed to use them."""

    config: TrainConfig
    params: ModelParams
    scaler: CurveScaler
    m: int
    log: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return time_grid(self.m, self.config.t_max)


# ---------------------------------------------------------------------------
# forward pass


def forward_batch(
    params: ModelParams,
    prefix_values: np.ndarray,
    times: np.ndarray,
    quotients,
    noise,
    ablate_graph: bool = False,
    substeps: int = 1,
):
    """Batched forward. ``times`` is the full grid ``t_1..t_m``.

    Returns predictions of shape ``(batch, m - n)`` and the posterior stats.
    """
    prefix_values = np.atleast_2d(prefix_values)
    batch, n = prefix_values.shape
    m = len(times)
    if not 1 <= n < m:
        raise ValueError(f"condition length {n} must lie in [1, {m})")
    stats = encode_sequences(prefix_values, times[:n], params.seq)
    z0 = sample_latent(stats, noise)
    d = ad.value(params.ode.W2).shape[1]
    if ablate_graph:
        z_graph = np.zeros((batch, d))
    else:
        # encode each distinct graph once (repeated samples share one graph)
        slot: dict[int, int] = {}
        unique = []
        for q in quotients:
            if id(q) not in slot:
                slot[id(q)] = len(unique)
                unique.append(q)
        z_graph = encode_quotients(unique, params.graph)
        if len(unique) < batch:
            z_graph = ad.getitem(z_graph, np.array([slot[id(q)] for q in quotients]))
    field_ = vector_field(z_graph, params.ode)
    states = integrate(field_, z0, times[n:], substeps)
    traj = ad.reshape(ad.stack(states, axis=0), (len(states) * batch, d))
    preds = ad.reshape(decode(traj, params.dec), (len(states), batch))
    return ad.transpose(preds), stats


def _check_grid(prefix: ObservedPrefix, horizon: int, t_max: float) -> np.ndarray:
    grid = time_grid(horizon, t_max)
    if prefix.n >= horizon:
        raise ValueError(f"prefix length {prefix.n} must be below the horizon {horizon}")
    if not np.allclose(prefix.times, grid[: prefix.n], rtol=1e-9, atol=1e-12):
        raise ValueError(f"prefix times are not on the grid t_i = i * {t_max}/{horizon}")
    return grid


def forward(
    prefix: ObservedPrefix,
    graph: ArchitectureGraph,
    params: ModelParams,
    noise,
    horizon: int,
    t_max: float = 1.0,
    ablate_graph: bool = False,
    substeps: int = 1,
):
    """Predictions for epochs ``n+1..horizon`` of one trial, plus posterior stats."""
    grid = _check_grid(prefix, horizon, t_max)
    noise = noise if isinstance(noise, ad.Var) else np.asarray(noise, dtype=np.float64)
    preds, stats = forward_batch(
        params,
        prefix.values[None, :],
        grid,
        [graph.quotient],
        ad.reshape(noise, (1, -1)),
        ablate_graph,
        substeps,
    )
    return ad.getitem(preds, 0), PosteriorStats(ad.getitem(stats.mu, 0), ad.getitem(stats.sigma, 0))


# ---------------------------------------------------------------------------
# objective


def kl_standard_normal(stats: PosteriorStats):
    """``KL(N(mu, sigma^2) || N(0, I))`` summed over the last axis."""
    mu, sigma = stats.mu, stats.sigma
    terms = ad.sub(ad.add(ad.square(mu), ad.square(sigma)), ad.add(1.0, ad.mul(2.0, ad.log(sigma))))
    return ad.mul(0.5, ad.sum(terms, axis=-1))


def elbo(pred, target, stats: PosteriorStats, config: TrainConfig):
    """Per-trial ELBO (summed over the prediction window)."""
    target = np.asarray(target, dtype=np.float64)
    s = config.obs_noise
    resid = ad.div(ad.sub(pred, target), s)
    n_pred = target.shape[-1]
    loglik = ad.sub(ad.mul(-0.5, ad.sum(ad.square(resid), axis=-1)), n_pred * math.log(s * math.sqrt(2 * math.pi)))
    return ad.sub(loglik, ad.mul(config.kl_weight, kl_standard_normal(stats)))


def negative_elbo(params, values, times, quotients, noise, config: TrainConfig):
    """Mean negative ELBO over a batch of transformed curves ``(batch, m)``."""
    n = config.condition_length
    preds, stats = forward_batch(params, values[:, :n], times, quotients, noise, config.ablate_graph, config.substeps)
    return ad.mul(-1.0, ad.mean(elbo(preds, values[:, n:], stats, config)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> OptimizerState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, weight_decay: float) -> dict:
    """One AdamW update with decoupled weight decay; advances ``state``."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {theta.shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        out[k] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps) - lr * weight_decay * theta
    return out


# ---------------------------------------------------------------------------
# training


def curve_matrix(trials: list[Trial], metric: str) -> np.ndarray:
    rows = []
    for t in trials:
        if metric not in t.curves:
            raise ValueError(f"trial {t.trial_id!r} has no {metric!r} curve")
        rows.append(t.curves[metric].values)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"curves differ in length: {sorted(lengths)}")
    return np.stack(rows)


def predict_mean(model: LCGODE, trials: list[Trial], batch_size: int = 256) -> np.ndarray:
    """Posterior-mean extrapolation (original scale), ``(len(trials), m - n)``."""
    n = model.config.condition_length
    raw = curve_matrix(trials, model.config.metric)
    values = model.scaler.transform(raw)
    d = model.config.latent_dim
    out = []
    for lo in range(0, len(trials), batch_size):
        chunk = trials[lo : lo + batch_size]
        preds, _ = forward_batch(
            model.params,
            values[lo : lo + len(chunk), :n],
            model.times,
            [t.graph.quotient for t in chunk],
            np.zeros((len(chunk), d)),
            model.config.ablate_graph,
            model.config.substeps,
        )
        out.append(preds)
    return model.scaler.inverse(np.concatenate(out, axis=0))


def _mape_rows(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    return np.mean(np.abs((truth - pred) / np.maximum(np.abs(truth), 1e-8)), axis=1)


def train(
    trials: list[Trial],
    config: TrainConfig,
    val_trials: list[Trial] | None = None,
    progress=None,
) -> LCGODE:
    """Fit LC-GODE by mini-batch negative-ELBO descent with early stopping.

    Without ``val_trials`` a ``config.val_fraction`` share of ``trials`` is
    held out (seeded).  ``progress(entry)`` is called after each epoch.
    """
    if not trials:
        raise TrainingError("empty training set")
    if val_trials is None:
        order = stream(config.seed, "train.val_split").permutation(len(trials))
        n_val = max(1, int(round(config.val_fraction * len(trials))))
        if n_val >= len(trials):
            raise TrainingError("too few trials to hold out a validation set")
        val_trials = [trials[i] for i in sorted(order[:n_val])]
        trials = [trials[i] for i in sorted(order[n_val:])]
    raw = curve_matrix(trials, config.metric)
    m = raw.shape[1]
    if config.condition_length >= m:
        raise TrainingError(f"condition length {config.condition_length} must be below curve length {m}")
    val_raw = curve_matrix(val_trials, config.metric)
    if val_raw.shape[1] != m:
        raise TrainingError("validation curves differ in length from training curves")

    scaler = CurveScaler.fit(config.metric, raw)
    values = scaler.transform(raw)
    quotients = [t.graph.quotient for t in trials]
    times = time_grid(m, config.t_max)
    n = config.condition_length

    params = init_params(config)
    params.dec.b = np.array(values[:, n:].mean())
    flat = params.arrays()
    state = OptimizerState.zeros_like(flat)
    rng = stream(config.seed, "train.batches")
    model = LCGODE(config, params, scaler, m)

    best = (math.inf, flat)
    stale = 0
    bad_epochs = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(trials))
        losses = []
        skipped = 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            noise = rng.standard_normal((len(idx), config.latent_dim))
            tape = ad.Tape()
            p = ModelParams.from_arrays(tape.bind(flat), config.pooling)
            try:
                loss = negative_elbo(p, values[idx], times, [quotients[i] for i in idx], noise, config)
            except IntegrationError as exc:
                log.warning("epoch %d: skipped step (%s)", epoch, exc)
                skipped += 1
                continue
            lval = float(loss.value)
            if not math.isfinite(lval):
                log.warning("epoch %d: skipped step with non-finite loss", epoch)
                skipped += 1
                continue
            grads = ad.backward(tape, loss)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                skipped += 1
                continue
            flat = adamw_step(flat, grads, state, config.learning_rate, config.weight_decay)
            # non-negative edge weights keep every degree of A + I at least 1
            flat["graph.edge_w"] = np.maximum(flat["graph.edge_w"], 0.0)
            losses.append(lval)

        train_loss = float(np.mean(losses)) if losses else math.nan
        model.params = ModelParams.from_arrays(flat, config.pooling)
        try:
            val_pred = predict_mean(model, val_trials)
            val_mape = float(np.mean(_mape_rows(val_raw[:, n:], val_pred)))
        except IntegrationError:
            val_mape = math.nan
        entry = {"epoch": epoch, "train_loss": train_loss, "val_mape": val_mape, "skipped_steps": skipped}
        history.append(entry)
        if progress is not None:
            progress(entry)

        if not math.isfinite(train_loss):
            bad_epochs += 1
            if bad_epochs >= 3:
                raise TrainingError(f"training diverged: non-finite loss for 3 consecutive epochs (last epoch {epoch})")
        else:
            bad_epochs = 0
        if math.isfinite(val_mape) and val_mape < best[0]:
            best = (val_mape, flat)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best val MAPE %.5f)", epoch, best[0])
                break

    model.params = ModelParams.from_arrays(best[1], config.pooling)
    model.log = history
    return model


# ---------------------------------------------------------------------------
# inference


def extrapolate(
    model: LCGODE,
    prefix: ObservedPrefix,
    graph: ArchitectureGraph,
    samples: int = 1,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of ``samples`` posterior draws for epochs ``n+1..m``.

    Without ``rng`` every draw uses zero noise, i.e. the posterior mean.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    grid = _check_grid(prefix, model.m, model.config.t_max)
    d = model.config.latent_dim
    noise = np.zeros((samples, d)) if rng is None else rng.standard_normal((samples, d))
    values = np.repeat(model.scaler.transform(prefix.values)[None, :], samples, axis=0)
    preds, _ = forward_batch(
        model.params,
        values,
        grid,
        [graph.quotient] * samples,
        noise,
        model.config.ablate_graph,
        model.config.substeps,
    )
    curves = model.scaler.inverse(preds)
    return curves.mean(axis=0), curves.std(axis=0)


def extrapolate_trials(
    model: LCGODE, trials: list[Trial], samples: int = 1, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`extrapolate` over trials; arrays of shape ``(trials, m - n)``."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = model.config.condition_length
    d = model.config.latent_dim
    values = model.scaler.transform(curve_matrix(trials, model.config.metric))
    if values.shape[1] != model.m:
        raise ValueError(f"dataset curves have {values.shape[1]} epochs, model was trained on {model.m}")
    draws = []
    for _ in range(samples):
        noise = np.zeros((len(trials), d)) if rng is None else rng.standard_normal((len(trials), d))
        preds, _ = forward_batch(
            model.params,
            values[:, :n],
            model.times,
            [t.graph.quotient for t in trials],
            noise,
            model.config.ablate_graph,
            model.config.substeps,
        )
        draws.append(model.scaler.inverse(preds))
    stack = np.stack(draws)
    return stack.mean(axis=0), stack.std(axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: LCGODE) -> None:
    tensors = {
        k: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
        for k, v in sorted(model.params.arrays().items())
    }
    doc = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "scaler": asdict(model.scaler),
        "m": model.m,
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> LCGODE:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    config = TrainConfig.from_dict(doc["config"])
    arrays = {
        k: np.asarray(t["values"], dtype=np.float64).reshape(t["shape"]) for k, t in doc["tensors"].items()
    }
    params = ModelParams.from_arrays(arrays, config.pooling)
    return LCGODE(config, params, CurveScaler(**doc["scaler"]), int(doc["m"]))


def prefix_of(curve: LearningCurve, n: int) -> ObservedPrefix:
    return ObservedPrefix(curve.values[:n], curve.times[:n])
