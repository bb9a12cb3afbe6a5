"""Normalizing flows (GLOW, Wavelet Flow) on a small numpy autodiff core, with likelihood-based OOD tools."""

from flowood.tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
