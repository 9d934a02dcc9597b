"""Build script. The compiled kernel extension is optional: if Cython or a C
compiler is missing, the build falls through to the pure-numpy fallback and the
package works unchanged (slower inner loops).
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/crossmae/kernels/_ckern.pyx",
        compiler_directives={"language_level": 3, "boundscheck": False, "wraparound": False},
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
        if sys.platform != "win32":
            ext.extra_compile_args = ["-O3"]
except Exception as exc:  # pragma: no cover - depends on build host
    print(f"crossmae: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
