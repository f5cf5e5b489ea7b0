"""Build script for the optional compiled kernels.

The extension is a performance aid only; if Cython or a C compiler is
unavailable the package installs with the NumPy fallback kernels.
"""

from setuptools import setup


def build_ext_modules():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "fedpav.kernels._speedups",
        sources=["src/fedpav/kernels/_speedups.pyx"],
        include_dirs=[numpy.get_include()],
        # -ffp-contract=off keeps double arithmetic identical to the
        # NumPy backend (no fused multiply-add in the AP accumulation).
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=build_ext_modules())
