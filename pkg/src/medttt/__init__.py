"""Test-time-training (TTT) segmentation on a float64 numpy autodiff engine."""

from .tensor import Tensor, backward, grad, no_grad
from .ttt import TttConfig, TttLayer, TttProjections, TttState
from .model import Model, ModelConfig, ablation_setting, build_model

__all__ = [
    "Tensor",
    "backward",
    "grad",
    "no_grad",
    "TttConfig",
    "TttLayer",
    "TttProjections",
    "TttState",
    "Model",
    "ModelConfig",
    "ablation_setting",
    "build_model",
]
__version__ = "0.1.0"
