"""Build script: compiles the optional similarity-search extension.

The package works without it (a numpy fallback is selected at import
time), so any build failure here degrades to the pure-Python wheel
instead of aborting the install.  Set WAKAVT_PURE=1 to skip the
extension on purpose.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class _OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"skipping optional extension build: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"skipping optional extension {ext.name}: {exc}")


ext_modules = []
if os.environ.get("WAKAVT_PURE") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "wakavt._simindex",
                    ["src/wakavt/_simindex.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level="3",
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules, cmdclass={"build_ext": _OptionalBuildExt})
