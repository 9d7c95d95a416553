"""Build the optional Cython kernel extension.

The package works without it (a NumPy fallback is selected at import),
so any failure here degrades to a pure-Python install instead of
aborting.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "deskmt._core.kernels",
                sources=["src/deskmt/_core/kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # missing compiler or Cython: fall back to pure
    print(f"warning: building without compiled kernels ({exc})")

setup(ext_modules=ext_modules)
