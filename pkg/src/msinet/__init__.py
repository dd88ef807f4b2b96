"""Saliency prediction with a dilated VGG16 encoder, multi-level feature
concatenation, an atrous pyramid context module and a bilinear decoder,
built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .model import Model, ModelConfig, count_parameters
from .tensor import Tensor, backward

__all__ = ["Model", "ModelConfig", "Tensor", "backward", "count_parameters", "__version__"]
