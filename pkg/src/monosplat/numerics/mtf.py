"""MTF tensor interchange format.

Bit-exact layout, little-endian throughout:

    magic   4 bytes  'M' 'S' 'T' 'F'
    version u32      1
    dtype   u32      0 (float32)
    rank    u32
    dims    rank x u64
    payload row-major float32

Readers reject unknown versions and dtypes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import DTYPE, as_tensor

MAGIC = b"MSTF"
VERSION = 1
DTYPE_F32 = 0
_MAX_RANK = 32


def write_mtf(path, arr: np.ndarray) -> None:
    """Serialize ``arr`` (cast to float32) to ``path``."""
    arr = as_tensor(arr)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_mtf(path) -> np.ndarray:
    """Read a float32 tensor from ``path``; raises ValueError on bad files."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise ValueError(f"{path}: not an MTF file")
    version, dtype, rank = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported MTF version {version}")
    if dtype != DTYPE_F32:
        raise ValueError(f"{path}: unsupported MTF dtype {dtype}")
    if rank > _MAX_RANK:
        raise ValueError(f"{path}: rank {rank} exceeds limit {_MAX_RANK}")
    off = 16
    if len(data) < off + 8 * rank:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = off + 4 * count
    if len(data) != expected:
        raise ValueError(f"{path}: payload size mismatch ({len(data)} != {expected})")
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    return np.ascontiguousarray(flat.reshape(shape).astype(DTYPE))
