import os

import numpy as np
from setuptools import Extension, setup

# The compiled core is optional: without Cython (or with MFCLIN_NO_EXT=1)
# the package installs and runs on its numpy fallback.
ext_modules = []
if os.environ.get("MFCLIN_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "mfclin._core",
                ["src/mfclin/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ]
        ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
