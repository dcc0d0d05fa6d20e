"""Multi-view mesh deformation via iterative graph-convolutional refinement."""

__version__ = "0.1.0"

from .kernels import BACKEND as kernel_backend
