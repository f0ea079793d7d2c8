"""Build script: compiles the optional Cython core when the toolchain allows.

The package is fully functional without the extension (a numpy fallback is
selected at import); set DFEDSIM_PURE_PYTHON=1 to skip compilation outright.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("DFEDSIM_PURE_PYTHON") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "dfedsim._core",
                    ["src/dfedsim/_core.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
