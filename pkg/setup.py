"""Build script: compiles the optional Cython kernel core.

    python setup.py build_ext --inplace

The extension is marked optional: if no compiler (or Cython) is available
the package installs anyway and falls back to the numpy kernels at import.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext = Extension(
        "latentflow._kernels._ckernels",
        ["src/latentflow/_kernels/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    ext_modules = cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    for e in ext_modules:
        e.optional = True
except ImportError:
    pass

setup(ext_modules=ext_modules)
