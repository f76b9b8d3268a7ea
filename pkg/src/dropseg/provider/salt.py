"""SALT binary tensor format.

Layout, all little-endian, no padding or checksum:

    bytes 0-3   magic "SALT"
    byte  4     version, 0x01
    byte  5     dtype: 0x01 = float32, 0x02 = uint8
    byte  6     ndim
    then        ndim * uint32 dims
    then        row-major payload

Round trips are bit-exact for the supported dtypes on every platform.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["SaltError", "encode", "decode", "MAGIC", "VERSION"]

MAGIC = b"SALT"
VERSION = 0x01

_DTYPE_CODES = {np.dtype("<f4"): 0x01, np.dtype("u1"): 0x02}
_CODE_DTYPES = {0x01: np.dtype("<f4"), 0x02: np.dtype("u1")}
_MAX_NDIM = 8


class SaltError(ValueError):
    """Malformed SALT payload; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode(array: np.ndarray) -> bytes:
    """Serialize a float32 or uint8 array; other dtypes must be cast first."""
    arr = np.asarray(array)
    if arr.dtype == np.float64:
        raise TypeError("cast to float32 before encoding (SALT stores float32)")
    key = np.dtype("<f4") if arr.dtype == np.float32 else arr.dtype
    if key not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; SALT holds float32 or uint8")
    if arr.ndim > _MAX_NDIM:
        raise ValueError(f"too many dimensions ({arr.ndim} > {_MAX_NDIM})")
    header = MAGIC + bytes([VERSION, _DTYPE_CODES[key], arr.ndim])
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    payload = np.ascontiguousarray(arr, dtype=key).tobytes()
    return header + payload


def decode(data: bytes) -> np.ndarray:
    """Parse SALT bytes back into an array; raises SaltError with an offset."""
    if len(data) < 7:
        raise SaltError("truncated header", len(data))
    if data[:4] != MAGIC:
        raise SaltError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if data[4] != VERSION:
        raise SaltError(f"unsupported version 0x{data[4]:02x}", 4)
    code = data[5]
    if code not in _CODE_DTYPES:
        raise SaltError(f"unknown dtype code 0x{code:02x}", 5)
    ndim = data[6]
    if ndim > _MAX_NDIM:
        raise SaltError(f"ndim {ndim} exceeds limit {_MAX_NDIM}", 6)
    dims_end = 7 + 4 * ndim
    if len(data) < dims_end:
        raise SaltError("truncated dimension list", len(data))
    shape = tuple(
        struct.unpack("<I", data[7 + 4 * i : 11 + 4 * i])[0] for i in range(ndim)
    )
    dtype = _CODE_DTYPES[code]
    n_items = 1
    for d in shape:
        n_items *= d
    expected = dims_end + n_items * dtype.itemsize
    if len(data) != expected:
        raise SaltError(
            f"payload length {len(data) - dims_end} != expected {n_items * dtype.itemsize}",
            dims_end,
        )
    return np.frombuffer(data[dims_end:], dtype=dtype).reshape(shape).copy()
