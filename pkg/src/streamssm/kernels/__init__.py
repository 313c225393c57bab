"""Selective-scan kernels with backend selection at import.

The compiled extension is used when present; setting
``STREAMSSM_PURE_PYTHON=1`` forces the numpy fallback. Both backends stay
importable through :func:`get_backend` so they can be compared directly.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

_BACKENDS = {"cython": "streamssm.kernels._scan_ext", "python": "streamssm.kernels._scan_py"}


def get_backend(name: str) -> ModuleType:
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(_BACKENDS)}")
    return importlib.import_module(_BACKENDS[name])


def available_backends() -> list[str]:
    names = []
    for name in _BACKENDS:
        try:
            get_backend(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select() -> tuple[str, ModuleType]:
    if not os.environ.get("STREAMSSM_PURE_PYTHON"):
        try:
            return "cython", get_backend("cython")
        except ImportError:
            pass
    return "python", get_backend("python")


BACKEND, _impl = _select()
selective_scan_fwd = _impl.selective_scan_fwd

__all__ = ["BACKEND", "available_backends", "get_backend", "selective_scan_fwd"]
