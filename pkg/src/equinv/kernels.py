"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``EQUINV_NO_EXT=1`` before import to force the numpy fallback.
"""
import os

from . import _pykernels

if os.environ.get("EQUINV_NO_EXT", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "numpy"

bilinear_sample = _impl.bilinear_sample
tps_eval = _impl.tps_eval


def backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"numpy": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
