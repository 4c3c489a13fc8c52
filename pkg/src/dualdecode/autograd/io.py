"""MKT1 binary tensor files.

Layout: ``b"MKT1"``, little-endian u32 rank, ``rank`` little-endian u64 dims,
then the row-major little-endian float64 payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..exceptions import DataError

MAGIC = b"MKT1"


def encode_tensor(array) -> bytes:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise DataError("not an MKT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise DataError("truncated MKT1 header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 8 * count:
        raise DataError(f"MKT1 payload has {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
