"""Build the optional Cython kernel extension.

If Cython or a C compiler is unavailable the package still installs and
``fedarks.kernels`` falls back to the NumPy implementation.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("FEDARKS_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "fedarks._kernels",
                    ["src/fedarks/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: weighted_sum must match the fallback bit-for-bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
