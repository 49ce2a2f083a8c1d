import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SEMSPLAT_SKIP_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "semsplat.backend._core",
                    ["src/semsplat/backend/_core.pyx"],
                    extra_compile_args=["-O3", "-fopenmp"],
                    extra_link_args=["-fopenmp"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # Falls back to the pure-python kernels in semsplat.backend.reference.
        ext_modules = []

setup(ext_modules=ext_modules)
