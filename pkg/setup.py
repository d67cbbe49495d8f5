"""Build script for the compiled integration kernel.

The package works without the extension (a pure-Python kernel is selected
at import time), but the compiled core is what makes ensemble runs fast.
-ffp-contract=off keeps the compiled arithmetic bit-identical to the
pure-Python kernel, which the parity tests rely on.
"""

from setuptools import setup, Extension
from Cython.Build import cythonize

extensions = [
    Extension(
        "glucoda._core",
        ["src/glucoda/_core.pyx"],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": 3},
    )
)
