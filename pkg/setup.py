"""Builds the optional compiled kernel core.

The extension is marked optional: if Cython or a C compiler is missing the
install still succeeds and the package falls back to the numpy kernels at
import time.  All metadata lives in pyproject.toml.
"""

import numpy as np
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "p2mx.kernels._core",
                ["src/p2mx/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
