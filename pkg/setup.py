import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SCENEFUSE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext = Extension(
            "scenefuse._kernels._fastkern",
            sources=["src/scenefuse/_kernels/_fastkern.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        )
        ext_modules = cythonize([ext], language_level="3")
    except Exception as exc:  # pragma: no cover - build hosts without a toolchain
        print(f"warning: building without compiled kernels ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
