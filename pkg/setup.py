"""Build script for the optional compiled kernel.

The package works without the extension (a numpy fallback is selected at
import time), so any failure here should not block installation. Set
PROGRPO_NO_EXT=1 to skip the build explicitly.
"""

import os

from setuptools import Extension, setup


def extensions():
    if os.environ.get("PROGRPO_NO_EXT"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "progrpo._kernels",
        sources=["src/progrpo/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions())
