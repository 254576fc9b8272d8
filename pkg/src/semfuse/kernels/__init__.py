"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the NumPy
fallback is used. ``SEMFUSE_KERNELS={auto,native,numpy}`` overrides the
choice, and :func:`get_backend` returns a specific backend for benchmarks
and cross-checking tests.
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _native
except ImportError:
    _native = None

SCHEME_CONSTANT = numpy_backend.SCHEME_CONSTANT
SCHEME_NORMAL_DISTANCE = numpy_backend.SCHEME_NORMAL_DISTANCE
SCHEME_QUADRATIC_DISTANCE = numpy_backend.SCHEME_QUADRATIC_DISTANCE


def get_backend(name: str = "auto"):
    """Return the kernel module for ``name`` (``auto``, ``native`` or ``numpy``)."""
    if name in (None, "", "auto"):
        name = os.environ.get("SEMFUSE_KERNELS", "auto")
    if name in (None, "", "auto"):
        return _native if _native is not None else numpy_backend
    if name == "native":
        if _native is None:
            raise ImportError("compiled kernels are not available; rebuild the package or use SEMFUSE_KERNELS=numpy")
        return _native
    if name == "numpy":
        return numpy_backend
    raise ValueError(f"unknown kernel backend {name!r}")


def backend_name(backend=None) -> str:
    backend = backend if backend is not None else get_backend()
    return "native" if backend is _native and _native is not None else "numpy"


def native_available() -> bool:
    return _native is not None
