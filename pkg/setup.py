"""Build script: compiles the optional packed-GEMV extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any failure here degrades to a pure-Python
install instead of aborting.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "blockqat.kernels._gemv_ext",
                ["src/blockqat/kernels/_gemv_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # noqa: BLE001 - extension is optional by design
    print(f"blockqat: skipping compiled kernel build ({exc}); using pure-Python fallback")

setup(ext_modules=ext_modules)
