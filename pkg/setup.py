import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "adiposeg._kernels._conv",
        ["src/adiposeg/_kernels/_conv.pyx"],
        include_dirs=[np.get_include(), "src/adiposeg/_kernels"],
        extra_compile_args=["-O3", "-march=native", "-ffast-math", "-mprefer-vector-width=512", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
