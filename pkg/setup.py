"""Build script for the optional compiled kernel core.

The package works without the extension (a vectorized numpy fallback is
selected at import); building it just makes the Monte Carlo and trajectory
loops much faster.  Build in place with::

    python setup.py build_ext --inplace
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedsaddle._kernels",
                ["src/fedsaddle/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
