"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures and results; used when the extension is not built or when
``FLOWNULL_PURE_PYTHON`` is set.
"""

import numpy as np


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_rows(a, inverse=False):
    """In-place unnormalized radix-2 DIT FFT along axis 1 of ``a``."""
    rows, n = a.shape
    if n & (n - 1):
        raise ValueError(f"row length {n} is not a power of two")
    if n <= 1:
        return
    sign = 1.0 if inverse else -1.0
    buf = a[:, _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        blocks = buf.reshape(rows, n // m, m)
        top = blocks[:, :, :half].copy()
        t = blocks[:, :, half:] * w
        blocks[:, :, :half] = top + t
        blocks[:, :, half:] = top - t
        m *= 2
    a[...] = buf


def im2col(x, kh, kw, pad):
    """Unfold (N, C, H, W) into (C*kh*kw, N*Ho*Wo) columns, stride 1."""
    N, C, H, W = x.shape
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, kh, kw, N, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + Ho, j:j + Wo].transpose(1, 0, 2, 3)
    return cols.reshape(C * kh * kw, N * Ho * Wo)


def col2im(cols, N, C, H, W, kh, kw, pad):
    """Adjoint of ``im2col``: scatter-add columns back to (N, C, H, W)."""
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    c6 = cols.reshape(C, kh, kw, N, Ho, Wo)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + Ho, j:j + Wo] += c6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp
