"""Unitary 2-D DFT over the last two axes, built on the radix-2 row kernel."""

import numpy as np

from flownull import kernels


class UnsupportedSizeError(ValueError):
    """Transform size is not a power of two."""


def _is_pow2(n):
    return n >= 1 and not (n & (n - 1))


def _out_dtype(x):
    return np.complex128 if x.dtype in (np.float64, np.complex128) else np.complex64


def _rows_fft(a, inverse):
    # a: complex128 array, transform along the last axis
    shape = a.shape
    buf = np.ascontiguousarray(a).reshape(-1, shape[-1])
    kernels.fft_rows(buf, inverse)
    return buf.reshape(shape)


def _fft2(x, inverse):
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("fft2 needs at least 2 dimensions")
    H, W = x.shape[-2:]
    if not (_is_pow2(H) and _is_pow2(W)):
        raise UnsupportedSizeError(f"fft2 supports power-of-two sizes only, got {H}x{W}")
    dtype = _out_dtype(x)
    a = x.astype(np.complex128)
    a = _rows_fft(a, inverse)
    a = np.swapaxes(_rows_fft(np.swapaxes(a, -1, -2), inverse), -1, -2)
    a *= 1.0 / np.sqrt(H * W)
    return a.astype(dtype)


def fft2(x):
    """Unitary forward 2-D DFT of ``x`` over its last two axes."""
    return _fft2(x, inverse=False)


def ifft2(x):
    """Unitary inverse 2-D DFT; exact adjoint of :func:`fft2`."""
    return _fft2(x, inverse=True)
