import os

from setuptools import setup

ext_modules = []
if os.environ.get("BANDPROBE_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        print("Cython/numpy missing at build time; installing the pure-Python kernels only")
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "bandprobe._ckernels",
                    ["src/bandprobe/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
