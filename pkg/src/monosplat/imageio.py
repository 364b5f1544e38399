"""Image file formats: 8-bit PNG for renders, PFM for float depth maps.

Internal math is linear [0,1]; PNG writing only quantizes to 8 bits.
PFM follows the usual convention: little-endian (scale -1.0), rows stored
bottom to top.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .numerics.tensor import DTYPE


def write_png(path, img: np.ndarray) -> None:
    """Write an (H,W,3) or (H,W) float image in [0,1] as 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    quant = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(quant).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG as float32 in [0,1], shape (H,W,3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=DTYPE)
    return arr / DTYPE(255.0)


def write_pfm(path, data: np.ndarray) -> None:
    """Write a float32 PFM, grayscale (H,W) or color (H,W,3)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM needs (H,W) or (H,W,3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        flat = np.frombuffer(fh.read(4 * count), dtype=dtype)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.ascontiguousarray(flat.reshape(shape)[::-1]).astype(DTYPE)
