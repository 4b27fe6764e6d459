import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional; the package falls back to numpy when
# Cython is unavailable or CPELAB_NO_EXT is set at build time.
ext_modules = []
if not os.environ.get("CPELAB_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "cpelab._ckernels",
                    ["src/cpelab/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
