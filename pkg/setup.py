import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("FEDBACKDOOR_PURE_PYTHON"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedbackdoor._kernels",
                ["src/fedbackdoor/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                language="c++",
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
