"""Two-stage lesion-map fusion pipeline for referable diabetic retinopathy
screening, built on a small float64 reverse-mode autodiff engine."""

from .config import RunConfig, load_config
from .errors import XfuseError
from .kernels import BACKEND
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "RunConfig", "Tensor", "XfuseError", "backward", "load_config", "no_grad", "__version__"]
