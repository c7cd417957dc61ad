"""Build script: compiles the optional Cython kernel core.

If Cython or a C compiler is unavailable the package still installs;
fedsupnet.kernels falls back to the pure-numpy implementation at import.
"""

import warnings

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedsupnet.kernels._core",
                ["src/fedsupnet/kernels/_core.pyx"],
                # -ffp-contract=off: keep mul+add rounding identical to the
                # pure-Python oracle path (no FMA contraction).
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - depends on build environment
    warnings.warn(f"compiled kernels disabled, building pure-Python only: {exc}")

setup(ext_modules=ext_modules)
