"""Build script: compiles the optional fused-kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes training and sampling faster.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "keylift._kernels",
    ["src/keylift/_kernels.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize(ext, language_level=3))
