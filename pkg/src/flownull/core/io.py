"""FNT1 binary tensor files.

Layout: magic ``b"FNT1"``, u8 dtype code, u8 rank, rank x u32 dims, then the
raw little-endian payload in row-major order. Complex values are stored as
interleaved (re, im) pairs, which is numpy's native complex layout.
"""

import struct

import numpy as np

MAGIC = b"FNT1"

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<c8"),
    2: np.dtype("<f8"),
    3: np.dtype("<c16"),
    4: np.dtype("<i4"),
    5: np.dtype("u1"),
}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def encode(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_OF:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank > 255")
    head = MAGIC + struct.pack("<BB", _CODE_OF[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(buf):
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not an FNT1 file")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    off = 6 + 4 * rank
    dt = DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != count * dt.itemsize:
        raise FormatError(f"payload size {len(buf) - off} does not match dims {dims}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save(path, arr):
    with open(path, "wb") as f:
        f.write(encode(arr))


def load(path):
    with open(path, "rb") as f:
        return decode(f.read())
