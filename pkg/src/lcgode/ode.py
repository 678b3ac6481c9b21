"""Architecture-conditioned latent ODE, fixed-step RK4, and the decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class IntegrationError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite latent state at integration step {step}")
        self.step = step


@dataclass
class OdeFuncParams:
    W1: object  # (2D, H), rows [:D] act on z, rows [D:] on z_G
    b1: object
    W2: object  # (H, D)
    b2: object

    def arrays(self, prefix: str = "ode.") -> dict:
        return {prefix + k: getattr(self, k) for k in ("W1", "b1", "W2", "b2")}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "ode.") -> OdeFuncParams:
        return cls(*(arrays[prefix + k] for k in ("W1", "b1", "W2", "b2")))


@dataclass
class DecoderParams:
    w: object
    b: object
    W_hidden: object = None
    b_hidden: object = None

    def arrays(self, prefix: str = "dec.") -> dict:
        out = {prefix + "w": self.w, prefix + "b": self.b}
        if self.W_hidden is not None:
            out[prefix + "W_hidden"] = self.W_hidden
            out[prefix + "b_hidden"] = self.b_hidden
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "dec.") -> DecoderParams:
        return cls(
            arrays[prefix + "w"],
            arrays[prefix + "b"],
            arrays.get(prefix + "W_hidden"),
            arrays.get(prefix + "b_hidden"),
        )


def init_ode_params(rng: np.random.Generator, latent_dim: int, hidden: int | None = None) -> OdeFuncParams:
    d = latent_dim
    h = hidden or d
    b1 = np.sqrt(6.0 / (2 * d + h))
    b2 = np.sqrt(6.0 / (h + d))
    return OdeFuncParams(
        rng.uniform(-b1, b1, (2 * d, h)),
        np.zeros(h),
        rng.uniform(-b2, b2, (h, d)),
        np.zeros(d),
    )


def init_decoder_params(rng: np.random.Generator, latent_dim: int, hidden: int = 0) -> DecoderParams:
    if hidden:
        bound = np.sqrt(6.0 / (latent_dim + hidden))
        return DecoderParams(
            rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden),
            np.zeros(()),
            rng.uniform(-bound, bound, (latent_dim, hidden)),
            np.zeros(hidden),
        )
    return DecoderParams(rng.normal(0.0, 1.0 / np.sqrt(latent_dim), latent_dim), np.zeros(()))


def vector_field(z_graph, p: OdeFuncParams):
    """Autonomous field ``z -> MLP([z || z_G])`` with ``z_G`` held fixed.

    The graph half of the first layer is evaluated once per trajectory.
    """
    d = ad.value(p.W2).shape[1]
    W_z = ad.getitem(p.W1, slice(0, d))
    W_g = ad.getitem(p.W1, slice(d, None))
    offset = ad.add(ad.matmul(z_graph, W_g), p.b1)

    def f(z):
        hidden = ad.tanh(ad.add(ad.matmul(z, W_z), offset))
        return ad.add(ad.matmul(hidden, p.W2), p.b2)

    return f


def ode_func(z, z_graph, p: OdeFuncParams):
    return vector_field(z_graph, p)(z)


def _check(z, step: int) -> None:
    if not np.all(np.isfinite(ad.value(z))):
        raise IntegrationError(step)


def rk4_step(f, z, h: float, step: int = 0):
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    k1 = f(z)
    k2 = f(ad.add(z, ad.mul(0.5 * h, k1)))
    k3 = f(ad.add(z, ad.mul(0.5 * h, k2)))
    k4 = f(ad.add(z, ad.mul(h, k3)))
    incr = ad.add(ad.add(k1, ad.mul(2.0, ad.add(k2, k3))), k4)
    out = ad.add(z, ad.mul(h / 6.0, incr))
    _check(out, step)
    return out


def integrate(f, z0, times, substeps: int = 1) -> list:
    """Latent state at every entry of ``times``; ``times[0]`` is the start."""
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("times must be a non-empty 1-d array")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    _check(z0, 0)
    states = [z0]
    z = z0
    step = 0
    for gap in np.diff(times):
        h = gap / substeps
        for _ in range(substeps):
            step += 1
            z = rk4_step(f, z, h, step)
        states.append(z)
    return states


def decode(z, p: DecoderParams):
    """Scalar read-out per latent state; works on ``(..., D)`` inputs."""
    if p.W_hidden is not None:
        z = ad.tanh(ad.add(ad.matmul(z, p.W_hidden), p.b_hidden))
    return ad.add(ad.matmul(z, p.w), p.b)
