"""Builds the compiled kernel core.

The extension is optional: if Cython or a C toolchain is unavailable the
package installs without it and falls back to the numpy kernels at import
time. -ffp-contract=off keeps the compiled arithmetic bitwise identical to
the numpy reference (no FMA contraction).
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "diomp.kernels._core",
                ["src/diomp/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
