import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# -ffp-contract=off keeps the compiled kernel bit-identical to the pure-Python
# twin (no FMA contraction); see tests/test_kernel_twins.py.
ext = Extension(
    "mfjump._kernel_c",
    ["src/mfjump/_kernel_c.pyx"],
    include_dirs=[numpy.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level=3) if cythonize else [])
