"""Build script for the optional compiled kernel core.

The package works without the extension: scenevoice.kernels falls back to
the pure numpy implementation when the compiled module is absent.
"""

import warnings

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:
    numpy = None
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "scenevoice.kernels._fast",
                ["src/scenevoice/kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    warnings.warn("Cython not available; installing with the pure numpy kernel backend only")
    ext_modules = []

setup(ext_modules=ext_modules)
