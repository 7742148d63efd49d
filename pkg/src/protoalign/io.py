"""Binary tensor file format (``.pseg``).

Layout, all little-endian::

    magic    4 bytes  b"PSEG"
    version  u16      1
    dtype    u8       0 = f32, 1 = f64, 2 = u8
    rank     u8
    dims     rank x u32
    payload  row-major raw values
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PSEG"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    if dtype not in _CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; expected float32, float64 or uint8")
    if arr.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<HBB", VERSION, _CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_tensor(buf: bytes, expect_dtype=None) -> np.ndarray:
    if len(buf) < 8:
        raise TensorFormatError(f"truncated header at offset {len(buf)}: need 8 bytes")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r} at offset 0")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at offset 4")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code} at offset 6")
    dtype = _DTYPES[code]
    if expect_dtype is not None and np.dtype(expect_dtype) != dtype:
        raise TensorFormatError(f"dtype mismatch at offset 6: file has {dtype}, expected {np.dtype(expect_dtype)}")
    dims_end = 8 + 4 * rank
    if len(buf) < dims_end:
        raise TensorFormatError(f"truncated dims at offset {len(buf)}: need {dims_end} bytes")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - dims_end != nbytes:
        raise TensorFormatError(
            f"payload at offset {dims_end} has {len(buf) - dims_end} bytes, expected {nbytes}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(shape).copy()


def write_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path: str | os.PathLike, expect_dtype=None) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_tensor(buf, expect_dtype)
    except TensorFormatError as exc:
        raise TensorFormatError(f"{path}: {exc}") from None
