"""Kernel backend selection.

The Cython core carries the scatter/gather-bound kernels (bilinear
sampling and 2x2 max pooling), where compiled loops beat numpy fancy
indexing by 1-2 orders of magnitude.  Convolutions always use the im2col
path in numpy_backend: its einsum lowers to multithreaded BLAS, which
outperforms scalar compiled loops at every backbone shape (see
benchmarks/bench_kernels.py).

Set P2MX_PURE_PYTHON=1 to force the numpy fallback for everything.
"""

import os

from . import numpy_backend

_FORCE_PURE = os.environ.get("P2MX_PURE_PYTHON", "0") not in ("", "0")

if _FORCE_PURE:
    _gather_impl = numpy_backend
    COMPILED = False
else:
    try:
        from . import _core as _gather_impl  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:
        _gather_impl = numpy_backend
        COMPILED = False

BACKEND = "compiled" if COMPILED else "numpy"

conv2d_forward = numpy_backend.conv2d_forward
conv2d_backward_input = numpy_backend.conv2d_backward_input
conv2d_backward_weight = numpy_backend.conv2d_backward_weight
maxpool2_forward = _gather_impl.maxpool2_forward
maxpool2_backward = _gather_impl.maxpool2_backward
bilinear_forward = _gather_impl.bilinear_forward
bilinear_backward = _gather_impl.bilinear_backward
