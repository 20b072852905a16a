import os

import numpy as np
from setuptools import Extension, setup

extensions = []
if os.environ.get("GRIDCASCADE_PURE", "0") != "1":
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "gridcascade.kernels._core",
                ["src/gridcascade/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
