"""Architecture-aware learning-curve extrapolation with a graph-conditioned latent ODE."""

__version__ = "0.1.0"
