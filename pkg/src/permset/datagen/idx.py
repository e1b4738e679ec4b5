"""IDX container (the MNIST file format).

Header: two zero bytes, a type code (0x08 = unsigned byte), the number of
dimensions, then one big-endian uint32 per dimension. Data follows row-major.
Paths ending in ``.gz`` are transparently decompressed.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx(path: Union[str, Path], expected_magic: int = None) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise IDXError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", buf[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IDXError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IDXError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    size = int(np.prod(dims, dtype=np.int64))
    offset = 4 + 4 * ndim
    if len(buf) - offset < size:
        raise IDXError(f"{path}: truncated data, expected {size} bytes, found {len(buf) - offset}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=offset).reshape(dims).copy()


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise IDXError("only unsigned byte IDX files are supported")
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    data = header + np.ascontiguousarray(arr).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(data)
    else:
        path.write_bytes(data)


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Read an MNIST-style image/label pair: ``(N, rows, cols)`` images and ``(N,)`` labels."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IDXError(f"{len(images)} images but {len(labels)} labels")
    return images, labels
