"""Kernel lane selection: compiled extension if available, pure-Python twin otherwise.

Set MFJUMP_FORCE_PURE=1 to force the pure lane (used by the benchmark and the
twin-equality tests). Both lanes are bit-identical by construction.
"""
from __future__ import annotations

import os

from . import _kernel_pure

if os.environ.get("MFJUMP_FORCE_PURE"):
    impl = _kernel_pure
else:
    try:
        from . import _kernel_c as impl  # type: ignore[no-redef]
    except ImportError:
        impl = _kernel_pure

HAVE_COMPILED = impl.IMPL == "compiled"
MajorantError = _kernel_pure.MajorantError
