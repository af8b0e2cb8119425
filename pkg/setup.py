"""Build the optional compiled RK4 kernel.

The package works without it: ``eventdiff.kernels`` falls back to the numpy
implementation when the extension is missing.
"""
import numpy as np
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - plain numpy install
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "eventdiff._kernels",
                ["src/eventdiff/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                libraries=["m"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
