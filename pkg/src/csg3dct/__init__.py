"""Inflated 3D convolution-transformer video classifier on a small numpy autodiff core."""
from . import ops
from .config import ModelConfig, RunConfig
from .kernels import BACKEND
from .model import CSG3DCT
from .tensor import Tensor, count_ops, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "CSG3DCT", "ModelConfig", "RunConfig", "Tensor", "count_ops", "no_grad", "ops"]
