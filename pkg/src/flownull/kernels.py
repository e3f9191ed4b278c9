"""Kernel backend selection.

The Cython extension is used when it is importable; otherwise (or when the
environment variable ``FLOWNULL_PURE_PYTHON`` is non-empty) the numpy
fallback is used. ``BACKEND`` names the active one.
"""

import os

from flownull import _pykernels

if os.environ.get("FLOWNULL_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from flownull import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

fft_rows = _impl.fft_rows
im2col = _impl.im2col
col2im = _impl.col2im


def available_backends():
    """Map backend name -> kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from flownull import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
