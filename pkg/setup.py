"""Build script for the optional compiled assembly kernels.

The package works without the extension: ``smagrb._kernels`` falls back to
a pure-numpy implementation when the compiled module is missing.  Any
failure while building the extension therefore only costs speed, never
functionality, so errors here are downgraded to a warning.
"""

import sys

from setuptools import Extension, setup


def extension_modules():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        print(f"smagrb: skipping compiled kernels ({exc})", file=sys.stderr)
        return []
    ext = Extension(
        "smagrb._kernels._speedups",
        sources=["src/smagrb/_kernels/_speedups.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extension_modules())
