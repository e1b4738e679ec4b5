"""Binary PGM (P5) and PPM (P6) images, maxval 255."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np


class PNMError(ValueError):
    pass


def write_pnm(path: Union[str, Path], image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise PNMError(f"expected uint8 image, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    # magic, width, height, maxval; '#' comments allowed between tokens
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"{path}: unsupported magic {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise PNMError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    n = w * h * channels
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos) if len(buf) - pos >= n else None
    if data is None:
        raise PNMError(f"{path}: truncated pixel data")
    return data.reshape((h, w) if channels == 1 else (h, w, 3)).copy()
