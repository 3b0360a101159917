"""Build script.

The compiled extension is optional: when Cython or a C compiler is
unavailable, or TRIANGLE_RISK_PURE_PYTHON=1 is set, the package installs
without it and the NumPy fallback kernels are used at import time.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("TRIANGLE_RISK_PURE_PYTHON") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "triangle_risk._core._series",
                    ["src/triangle_risk/_core/_series.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
