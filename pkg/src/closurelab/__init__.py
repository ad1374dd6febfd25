"""Trajectory-based calibration of stochastic closures for a coarse-grained
two-layer quasi-geostrophic model, scored with the energy score."""

__version__ = "0.1.0"

from .closure import ClosureParams, LinearSpectral, LocalStencil, NoClosure  # noqa: E402
from .qg import InstabilityDetected, QgParams  # noqa: E402
from .scoring import LossConfig, energy_score, online_loss  # noqa: E402
from .spectral import Grid  # noqa: E402

__all__ = [
    "ClosureParams",
    "Grid",
    "InstabilityDetected",
    "LinearSpectral",
    "LocalStencil",
    "LossConfig",
    "NoClosure",
    "QgParams",
    "energy_score",
    "online_loss",
]
