"""Long conditioned motion composition with a blended-PE diffusion transformer."""

from motioncompose.tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_check", "no_grad", "__version__"]
