"""MTF tensor files, independent implementation of the documented format.

Layout (little-endian): magic ``MSTF``, u32 version (1), u32 dtype
(0 = float32), u32 rank, rank x u64 dims, row-major float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSTF"
VERSION = 1
DTYPE_F32 = 0


def write_mtf(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_mtf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an MTF file")
    version, dtype, rank = struct.unpack_from("<III", data, 4)
    if version != VERSION or dtype != DTYPE_F32:
        raise ValueError(f"{path}: unsupported MTF version/dtype {version}/{dtype}")
    shape = struct.unpack_from(f"<{rank}Q", data, 16)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=16 + 8 * rank)
    return np.ascontiguousarray(flat.reshape(shape))
