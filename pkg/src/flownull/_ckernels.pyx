# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: batched radix-2 FFT rows, im2col and col2im.

Every function here has a drop-in twin in ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, M_PI

cnp.import_array()

ctypedef fused real_t:
    float
    double


def fft_rows(double complex[:, ::1] a, bint inverse=False):
    """In-place unnormalized radix-2 DIT FFT along axis 1 of ``a``."""
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, i, j, k, m, half, bit, start
    cdef double complex t, u, w, wm
    cdef double sign = 1.0 if inverse else -1.0
    cdef double ang
    if n & (n - 1):
        raise ValueError(f"row length {n} is not a power of two")
    if n <= 1:
        return
    # twiddle table shared across rows
    tw = np.empty(n // 2, dtype=np.complex128)
    cdef double complex[::1] twv = tw
    for k in range(n // 2):
        ang = sign * 2.0 * M_PI * k / n
        twv[k] = cos(ang) + 1j * sin(ang)
    with nogil:
        for r in range(rows):
            j = 0
            for i in range(1, n):
                bit = n >> 1
                while j & bit:
                    j ^= bit
                    bit >>= 1
                j |= bit
                if i < j:
                    t = a[r, i]
                    a[r, i] = a[r, j]
                    a[r, j] = t
            m = 2
            while m <= n:
                half = m >> 1
                start = 0
                while start < n:
                    for k in range(half):
                        w = twv[k * (n // m)]
                        t = w * a[r, start + k + half]
                        u = a[r, start + k]
                        a[r, start + k] = u + t
                        a[r, start + k + half] = u - t
                    start += m
                m <<= 1


def im2col(real_t[:, :, :, ::1] x, int kh, int kw, int pad):
    """Unfold (N, C, H, W) into (C*kh*kw, N*Ho*Wo) columns, stride 1."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1
    cdef Py_ssize_t n, c, i, j, h, w, row, col0, hi, wi
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((C * kh * kw, N * Ho * Wo), dtype=dtype)
    cdef real_t[:, ::1] cols = out
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for n in range(N):
                        col0 = n * Ho * Wo
                        for h in range(Ho):
                            hi = h + i - pad
                            if hi < 0 or hi >= H:
                                continue
                            for w in range(Wo):
                                wi = w + j - pad
                                if wi < 0 or wi >= W:
                                    continue
                                cols[row, col0 + h * Wo + w] = x[n, c, hi, wi]
    return out


def col2im(real_t[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, int kh, int kw, int pad):
    """Adjoint of ``im2col``: scatter-add columns back to (N, C, H, W)."""
    cdef Py_ssize_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1
    cdef Py_ssize_t n, c, i, j, h, w, row, col0, hi, wi
    dtype = np.float32 if real_t is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef real_t[:, :, :, ::1] x = out
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for n in range(N):
                        col0 = n * Ho * Wo
                        for h in range(Ho):
                            hi = h + i - pad
                            if hi < 0 or hi >= H:
                                continue
                            for w in range(Wo):
                                wi = w + j - pad
                                if wi < 0 or wi >= W:
                                    continue
                                x[n, c, hi, wi] += cols[row, col0 + h * Wo + w]
    return out
