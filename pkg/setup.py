import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

_PYX = os.path.join("src", "contraction_kit", "_backend", "_kernels.pyx")

if cythonize is not None and os.path.exists(_PYX):
    extensions = cythonize(
        [
            Extension(
                "contraction_kit._backend._kernels",
                [_PYX],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
else:
    # No Cython at build time: ship the pure NumPy backend only.
    extensions = []

setup(ext_modules=extensions)
