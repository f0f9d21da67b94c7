import os

from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps multiply and add separately rounded, which the
# fixed-accumulation-order contract of the kernels relies on.
compile_args = ["-O3", "-ffp-contract=off", "-funroll-loops"]
if not os.environ.get("FCNREG_PORTABLE"):
    compile_args.append("-march=native")

extensions = [
    Extension(
        "fcnreg._kernels",
        ["src/fcnreg/_kernels.pyx"],
        include_dirs=["src/fcnreg"],
        extra_compile_args=compile_args,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
)
