"""Build script: compiles the optional Cython convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only degrades speed, never correctness.
"""

import numpy
from setuptools import setup
from setuptools.extension import Extension
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        [Extension("vtm.kernels._native",
                   ["src/vtm/kernels/_native.pyx"],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    ),
    include_dirs=[numpy.get_include()],
)
