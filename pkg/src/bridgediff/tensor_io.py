"""Binary tensor file format.

Layout: magic ``NDT1``, u8 dtype code (0 = f32, 1 = f64), u8 rank,
rank x u32 little-endian dims, then the raw little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NDT1"
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFileError(Exception):
    pass


def save_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFileError("rank exceeds format limit")
    code = _DTYPE_TO_CODE[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFileError(f"bad magic in {path}")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _CODE_TO_DTYPE:
        raise TensorFileError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", raw, 6)
    dtype = _CODE_TO_DTYPE[code]
    offset = 6 + 4 * rank
    expected = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise TensorFileError(f"payload length {len(payload)} != expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)
