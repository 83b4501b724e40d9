"""Build script for the optional compiled IRLS kernel.

The package works without the extension (a pure-numpy fallback is selected
at import time), so the build is marked optional: a missing compiler or
Cython degrades to the slower backend instead of failing the install.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "twostage_tmle._core.irls_kernel",
                ["src/twostage_tmle/_core/irls_kernel.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
