"""Builds the optional compiled kernel extension.

The package works without it (a numpy fallback is selected at import),
so the extension is marked optional: a failed compile degrades to the
fallback instead of breaking the install.
"""

from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "voxrep._kernels",
        ["src/voxrep/_kernels.pyx"],
        include_dirs=["src/voxrep"],
        extra_compile_args=["-O3", "-march=native", "-funroll-loops", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
