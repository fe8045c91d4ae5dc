"""Build script: compiles the optional Cython greedy-selection core.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so a missing compiler or Cython must not break
installation.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "specprune._greedy_core",
                ["src/specprune/_greedy_core.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
