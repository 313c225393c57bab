"""Builds the optional Cython scan kernel.

If Cython or a C compiler is unavailable the package still installs and
falls back to the numpy kernel at import time.
"""
import os

from setuptools import setup
from setuptools.command.build_ext import build_ext as _build_ext


class optional_build_ext(_build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"WARNING: scan extension not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"WARNING: failed to build {ext.name} ({exc}); using numpy fallback")


def compile_args():
    # no trapping/errno lets gcc if-convert and vectorize the state loop;
    # results are unchanged (numpy never enables FP traps)
    args = ["-O3", "-fno-math-errno", "-fno-trapping-math"]
    # STREAMSSM_PORTABLE=1 skips host-specific instructions (e.g. for wheels)
    if not os.environ.get("STREAMSSM_PORTABLE"):
        args.append("-march=native")
    return args


def extensions():
    if os.environ.get("STREAMSSM_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "streamssm.kernels._scan_ext",
        ["src/streamssm/kernels/_scan_ext.pyx"],
        include_dirs=[np.get_include(), "src/streamssm/kernels"],
        extra_compile_args=compile_args(),
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    try:
        return cythonize(
            [ext],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except Exception as exc:  # noqa: BLE001
        print(f"WARNING: cythonize failed ({exc}); using numpy fallback")
        return []


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
