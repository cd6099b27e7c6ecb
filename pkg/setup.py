"""Build hook for the optional Cython kernel extension.

If Cython or a C compiler is unavailable the package still installs and
``freegrad.kernels`` falls back to the numpy implementations.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("FREEGRAD_NO_EXT", "") not in ("1", "true", "yes"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "freegrad._ckernels",
                    ["src/freegrad/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
