import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("IMPALLOC_NO_EXT", "") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "impalloc.kernels._ckernels",
                ["src/impalloc/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
