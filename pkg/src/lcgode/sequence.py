"""GRU encoder for the observed prefix of a learning curve.

The prefix ``{(y_i, t_i)}`` is read forward in time from a zero hidden state;
the last hidden state is mapped to the mean and standard deviation of the
Gaussian posterior over the initial latent state of the extrapolation.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad

SIGMA_FLOOR = 1e-4
INITIAL_SIGMA = 0.1


@dataclass
class ObservedPrefix:
    values: np.ndarray
    times: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.values.shape != self.times.shape or self.values.ndim != 1:
            raise ValueError("prefix values and times must be 1-d arrays of equal length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("prefix values must be finite")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("prefix times must be strictly increasing")

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass
class PosteriorStats:
    mu: object
    sigma: object


@dataclass
class SeqEncoderParams:
    W_in: object
    b_in: object
    W_z: object
    U_z: object
    b_z: object
    W_r: object
    U_r: object
    b_r: object
    W_h: object
    U_h: object
    b_h: object
    W_mu: object
    b_mu: object
    W_sigma: object
    b_sigma: object

    def arrays(self, prefix: str = "seq.") -> dict:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "seq.") -> SeqEncoderParams:
        return cls(**{f.name: arrays[prefix + f.name] for f in fields(cls)})

    @property
    def hidden_dim(self) -> int:
        return ad.value(self.U_z).shape[0]


def init_seq_params(rng: np.random.Generator, latent_dim: int) -> SeqEncoderParams:
    d = latent_dim

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    zeros = np.zeros
    return SeqEncoderParams(
        W_in=glorot(2, d), b_in=zeros(d),
        W_z=glorot(d, d), U_z=glorot(d, d), b_z=zeros(d),
        W_r=glorot(d, d), U_r=glorot(d, d), b_r=zeros(d),
        W_h=glorot(d, d), U_h=glorot(d, d), b_h=zeros(d),
        W_mu=glorot(d, d), b_mu=zeros(d),
        W_sigma=glorot(d, d),
        # softplus^-1 so a zero hidden state starts at INITIAL_SIGMA
        b_sigma=np.full(d, np.log(np.expm1(INITIAL_SIGMA - SIGMA_FLOOR))),
    )  # fmt: skip


def gru_cell(h, x, p: SeqEncoderParams):
    u = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.W_z), ad.matmul(h, p.U_z)), p.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.W_r), ad.matmul(h, p.U_r)), p.b_r))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, p.W_h), ad.matmul(ad.mul(r, h), p.U_h)), p.b_h))
    return ad.add(ad.mul(ad.sub(1.0, u), h), ad.mul(u, cand))


def encode_sequences(values: np.ndarray, times: np.ndarray, p: SeqEncoderParams) -> PosteriorStats:
    """Batched encoder: ``values`` is ``(batch, n)``, ``times`` is ``(n,)``."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    times = np.asarray(times, dtype=np.float64)
    batch, n = values.shape
    if n == 0:
        raise ValueError("empty prefix: nothing observed")
    h = np.zeros((batch, p.hidden_dim))
    for i in range(n):
        pair = np.stack([values[:, i], np.full(batch, times[i])], axis=1)
        x = ad.add(ad.matmul(pair, p.W_in), p.b_in)
        h = gru_cell(h, x, p)
    mu = ad.add(ad.matmul(h, p.W_mu), p.b_mu)
    sigma = ad.add(ad.softplus(ad.add(ad.matmul(h, p.W_sigma), p.b_sigma)), SIGMA_FLOOR)
    return PosteriorStats(mu, sigma)


def encode_observations(prefix: ObservedPrefix, p: SeqEncoderParams) -> PosteriorStats:
    if prefix.n == 0:
        raise ValueError("empty prefix: nothing observed")
    stats = encode_sequences(prefix.values[None, :], prefix.times, p)
    return PosteriorStats(ad.getitem(stats.mu, 0), ad.getitem(stats.sigma, 0))


def sample_latent(stats: PosteriorStats, noise):
    """Reparameterized draw ``mu + sigma * noise``."""
    return ad.add(stats.mu, ad.mul(stats.sigma, noise))
