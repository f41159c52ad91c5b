"""Binary tensor container: fixed little-endian header plus row-major payload.

Layout: magic ``BWNH`` | u8 version | u8 dtype (0=F32, 1=I8) | u8 ndim |
u8 reserved | ndim x u32 dims | payload. I8 payloads carry binary codes and
may only hold -1/+1.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"BWNH"
VERSION = 1

DTYPE_F32 = 0
DTYPE_I8 = 1

_WRITE_DTYPES = {
    np.dtype(np.float32): DTYPE_F32,
    np.dtype(np.int8): DTYPE_I8,
}
_READ_DTYPES = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_I8: np.dtype(np.int8),
}


class TensorFileError(Exception):
    """Base class for tensor container violations."""


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class UnknownDtypeError(TensorFileError):
    pass


class PayloadSizeError(TensorFileError):
    pass


class InvalidBinaryCodeError(TensorFileError):
    pass


def _check_codes(data: np.ndarray) -> None:
    if data.size and not np.isin(data, (-1, 1)).all():
        raise InvalidBinaryCodeError(
            "invalid binary code: I8 payload must contain only -1 and +1"
        )


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    """Write ``arr`` (float32 or int8, ndim >= 1) to ``path``."""
    arr = np.asarray(arr)
    code = _WRITE_DTYPES.get(arr.dtype)
    if code is None:
        raise UnknownDtypeError(f"unsupported dtype {arr.dtype}; expected float32 or int8")
    if arr.ndim < 1 or arr.ndim > 255:
        raise TensorFileError(f"ndim must be in 1..255, got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise TensorFileError(f"dims must be positive, got {arr.shape}")
    if code == DTYPE_I8:
        _check_codes(arr)
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_READ_DTYPES[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file, returning a float32 or int8 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise BadMagicError(f"{path}: file too short for header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim, _reserved = struct.unpack("<BBBB", raw[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    dtype = _READ_DTYPES.get(code)
    if dtype is None:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise PayloadSizeError(f"{path}: truncated dims block")
    dims = struct.unpack(f"<{ndim}I", raw[8:dims_end])
    if any(d == 0 for d in dims):
        raise PayloadSizeError(f"{path}: zero dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    expected = dims_end + count * dtype.itemsize
    if len(raw) != expected:
        raise PayloadSizeError(
            f"{path}: dims {dims} imply {expected} bytes, file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(dims)
    if code == DTYPE_I8:
        _check_codes(data)
    return data.copy()
