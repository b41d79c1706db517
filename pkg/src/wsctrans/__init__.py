"""3D encoder-decoder segmentation network with windowed and channel attention."""

from .tensor import Tensor, Rng, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Rng", "grad_check", "__version__"]
