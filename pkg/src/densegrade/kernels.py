"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the NumPy
fallback. ``DENSEGRADE_BACKEND=python`` forces the fallback.
"""
import contextlib
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("DENSEGRADE_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def set_backend(name):
    """Switch the process-wide backend; returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    _impl, BACKEND = get_backend(name), name
    return prev


@contextlib.contextmanager
def use_backend(name):
    prev = set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def im2col(xp, kh, kw, sh, sw):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw, sh, sw)


def col2im(cols, shape, kh, kw, sh, sw):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(shape), kh, kw, sh, sw)


def bilinear_warp(img, inv, fill_nearest=True, cval=0.0):
    inv = np.ascontiguousarray(inv, dtype=np.float64)
    return _impl.bilinear_warp(np.ascontiguousarray(img), inv, bool(fill_nearest), float(cval))
