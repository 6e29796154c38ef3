"""capsprobe: explain and attack small ConvNets, capsule networks and vision transformers."""

from . import kernels
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "kernels", "no_grad", "__version__"]
