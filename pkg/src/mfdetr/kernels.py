"""Backend selection for the bilinear sampling kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Setting ``MFD_KERNELS=numpy`` forces the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _bilinear_py

_ext = None
if os.environ.get("MFD_KERNELS", "").lower() != "numpy":
    try:
        from . import _bilinear_ext as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "numpy"
_impl = _ext if _ext is not None else _bilinear_py


def gather(value: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear read of ``value`` (G,H,W,C) at ``pts`` (G,P,2) -> (G,P,C)."""
    return _impl.gather(np.ascontiguousarray(value, dtype=np.float64),
                        np.ascontiguousarray(pts, dtype=np.float64))


def scatter(value: np.ndarray, pts: np.ndarray, gout: np.ndarray, want_pts: bool = True):
    """Adjoint of :func:`gather`; returns (grad_value, grad_pts)."""
    return _impl.scatter(np.ascontiguousarray(value, dtype=np.float64),
                         np.ascontiguousarray(pts, dtype=np.float64),
                         np.ascontiguousarray(gout, dtype=np.float64),
                         bool(want_pts))


class use_backend:
    """Switch implementation; also usable as a context manager that restores the previous one."""

    def __init__(self, name: str):
        global _impl, BACKEND
        self._saved = (_impl, BACKEND)
        if name == "cython":
            if _ext is None:
                raise RuntimeError("compiled kernels are not available")
            _impl, BACKEND = _ext, "cython"
        elif name == "numpy":
            _impl, BACKEND = _bilinear_py, "numpy"
        else:
            raise ValueError(f"unknown backend {name!r}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        global _impl, BACKEND
        _impl, BACKEND = self._saved


def available_backends() -> list[str]:
    return (["cython"] if _ext is not None else []) + ["numpy"]
