"""Build the optional Cython rasterization core.

The extension is skipped when Cython or a C compiler is unavailable; the
package then runs on the numpy fallback in ``auglidar.render._kernels_py``.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("AUGLIDAR_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "auglidar.render._kernels",
                    ["src/auglidar/render/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
