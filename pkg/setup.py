"""Build script for the optional compiled ranking kernels.

The package works without the extension (a NumPy fallback is selected at
import time); building it just makes sweep evaluation much faster.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import setup

setup(
    ext_modules=cythonize(
        "src/paragon/kernels/_ext.pyx",
        compiler_directives={"language_level": "3"},
    ),
    include_dirs=[np.get_include()],
)
