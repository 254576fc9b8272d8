"""Build script for the optional compiled fusion kernels.

The package works without the extension (a NumPy fallback is selected at
import time); building it just makes frame integration faster and enables
multi-core scaling via OpenMP.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    compile_args = ["-O3", "-fopenmp", "-ffp-contract=off"]
    link_args = ["-fopenmp"]

    ext_modules = cythonize(
        [
            Extension(
                "semfuse.kernels._native",
                ["src/semfuse/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
