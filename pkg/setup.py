import os

from setuptools import Extension, setup

# The compiled kernels are optional: without Cython or a C compiler the
# package still installs and runs on the numpy fallback.
ext_modules = []
if os.environ.get("ELASTIC_RANK_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        extensions = [
            Extension(
                "elastic_rank._ckernels",
                ["src/elastic_rank/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: results must match the numpy fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
