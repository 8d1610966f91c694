"""Build script for the optional compiled core.

The Cython extension ``bnmf._core`` accelerates the batchnorm kernels used
by the Monte Carlo simulator.  If Cython or a C compiler is unavailable the
build proceeds without it and ``bnmf`` falls back to ``bnmf._core_py``.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("BNMF_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "bnmf._core",
                    ["src/bnmf/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
