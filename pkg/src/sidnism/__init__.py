"""Self-supervised Retinex decomposition and illumination saturation mapping
for low-light image enhancement."""

from .image_core import hist_equalize, load_png, save_png, spatial_gradients, to_grayscale
from .metrics import MetricsReport, build_report
from .nism import NismParams, apply_gamma, apply_nism, estimate_eta, recompose
from .sid_net import DecompositionResult, SidConfig, decompose

__version__ = "0.1.0"

__all__ = [
    "DecompositionResult",
    "MetricsReport",
    "NismParams",
    "SidConfig",
    "apply_gamma",
    "apply_nism",
    "build_report",
    "decompose",
    "estimate_eta",
    "hist_equalize",
    "load_png",
    "recompose",
    "save_png",
    "spatial_gradients",
    "to_grayscale",
]
