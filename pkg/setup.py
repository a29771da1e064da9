import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Set ODFREG_PORTABLE=1 to build without CPU-specific instructions.
flags = ["-O3", "-ffast-math", "-fopenmp"]
if os.environ.get("ODFREG_PORTABLE", "0") in ("", "0"):
    flags.append("-march=native")

extensions = [
    Extension(
        "odfreg._ccore",
        ["src/odfreg/_ccore.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=flags,
        extra_link_args=["-fopenmp"],
        libraries=["mvec", "m"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
