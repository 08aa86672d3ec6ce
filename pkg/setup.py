import os

import numpy
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FHTENSOR_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("fhtensor._ckernels", ["src/fhtensor/_ckernels.pyx"],
                       include_dirs=[numpy.get_include()],
                       extra_compile_args=["-O3"])],
            language_level=3,
        )

setup(ext_modules=ext_modules)
