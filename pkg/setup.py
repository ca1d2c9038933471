# Build the optional compiled kernels in place:  python3 setup.py build_ext --inplace
# If Cython or a compiler is missing the package still installs and uses the NumPy fallback.
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("UNSUPFACE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "unsupface._ckernels",
                    ["src/unsupface/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
