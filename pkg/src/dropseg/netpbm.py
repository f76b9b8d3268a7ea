"""Binary netpbm readers/writers: PGM (P5) for label rasters, PPM (P6) for
images and overlays. Only maxval 255 is accepted; ASCII variants (P2/P3) are
rejected."""

from __future__ import annotations

import numpy as np

__all__ = ["NetpbmError", "read_pgm", "write_pgm", "read_ppm", "write_ppm"]


class NetpbmError(ValueError):
    pass


def _parse_header(data: bytes, magic: bytes):
    if data[:2] in (b"P2", b"P3"):
        raise NetpbmError(f"ASCII netpbm ({data[:2].decode()}) not supported, need {magic.decode()}")
    if data[:2] != magic:
        raise NetpbmError(f"bad magic {data[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise NetpbmError("truncated header")
        c = data[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise NetpbmError("unterminated comment")
            pos = nl + 1
        elif c.isdigit():
            end = pos
            while end < len(data) and data[end : end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise NetpbmError(f"unexpected byte {c!r} in header")
    # exactly one whitespace byte separates maxval from the payload
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise NetpbmError("missing whitespace before payload")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise NetpbmError(f"maxval {maxval} not supported, must be 255")
    if width < 1 or height < 1:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    return width, height, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an (H, W) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _parse_header(data, b"P5")
    payload = data[pos:]
    if len(payload) != width * height:
        raise NetpbmError(f"payload is {len(payload)} bytes, expected {width * height}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, array):
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise NetpbmError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise NetpbmError("values outside [0, 255] cannot be written as PGM")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _parse_header(data, b"P6")
    payload = data[pos:]
    if len(payload) != width * height * 3:
        raise NetpbmError(f"payload is {len(payload)} bytes, expected {width * height * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, array):
    arr = np.asarray(array)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise NetpbmError(f"PPM needs an (H, W, 3) array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise NetpbmError("values outside [0, 255] cannot be written as PPM")
        arr = arr.astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
