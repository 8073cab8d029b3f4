"""Builds the optional compiled kernel extension.

The package is fully functional without it (a pure-numpy backend is
selected at import time), so the extension is marked optional: a failed
compile degrades to the fallback instead of breaking the install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "vsrkit.kernels._fastkernels",
        sources=["src/vsrkit/kernels/_fastkernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)
    for e in ext_modules:
        e.optional = True
except ImportError:
    pass

setup(ext_modules=ext_modules)
