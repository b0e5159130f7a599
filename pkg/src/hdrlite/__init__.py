"""Single-image HDR reconstruction lab.

Lightweight two-step network on a from-scratch autodiff tensor engine,
camera-pipeline degradation simulator, HDR raster I/O, desk-scale training
and evaluation.
"""

from .imgio import Image, LINEAR_HDR, NONLINEAR_SDR
from .model import ModelConfig, Network, count_macs, count_params
from .tensor import Tensor

__all__ = [
    "Image", "LINEAR_HDR", "NONLINEAR_SDR",
    "ModelConfig", "Network", "count_macs", "count_params",
    "Tensor",
]

__version__ = "0.1.0"
