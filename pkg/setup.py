import os

from setuptools import setup, Extension

try:
    from Cython.Build import cythonize
    import numpy
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "scsdpo.kernels._distill",
                [os.path.join("src", "scsdpo", "kernels", "_distill.pyx")],
                include_dirs=[numpy.get_include()],
                libraries=["m"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
