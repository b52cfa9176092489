"""Builds the optional compiled integrator; the package works without it."""
from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = [Extension("fdia._integrate", ["src/fdia/_integrate.pyx"],
                            include_dirs=[np.get_include()])]
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
except ImportError:
    pass

setup(ext_modules=ext_modules)
