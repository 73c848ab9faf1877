"""Gradient-set geometry for deep models: widths, Rademacher complexities and GD diagnostics."""
from __future__ import annotations

__version__ = "0.1.0"

from .numerics import RngStream, spectral_norm  # noqa: E402
from .networks import NetworkConfig, NetworkParams, SpectralBall, init_network  # noqa: E402
from .geometry import GradientSetSpec, InnerBudget, lggw_estimate, nerc_estimate  # noqa: E402

__all__ = [
    "__version__",
    "RngStream",
    "spectral_norm",
    "NetworkConfig",
    "NetworkParams",
    "SpectralBall",
    "init_network",
    "GradientSetSpec",
    "InnerBudget",
    "lggw_estimate",
    "nerc_estimate",
]
