"""Binary PGM/PPM (P5/P6) reading and writing, plus sample grids."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError


def _tokens(data: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping ``#`` comments."""
    out, pos = [], 2
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PNM header", start, path)
        out.append(int(data[start:pos]))
    # exactly one whitespace byte separates header from raster
    return out, pos + 1


def decode_pnm(data: bytes, path=None) -> np.ndarray:
    """Decode P5/P6 bytes to ``uint8 [channels, h, w]``."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}", 0, path)
    (w, h, maxval), start = _tokens(data, 3, path)
    if not 0 < maxval <= 255:
        raise FormatError(f"maxval {maxval} not in 1..255", start, path)
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    raster = data[start:start + need]
    if len(raster) < need:
        raise FormatError(f"raster truncated: {len(raster)} of {need} bytes", start + len(raster), path)
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, ch)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), str(path))


def encode_pnm(image: np.ndarray) -> bytes:
    """``uint8 [channels, h, w]`` (1 or 3 channels) to P5/P6 bytes."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    ch, h, w = img.shape
    if ch not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {ch}")
    magic = b"P5" if ch == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode()
    return header + np.ascontiguousarray(img.transpose(1, 2, 0), dtype=np.uint8).tobytes()


def write_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_pnm(image))
    except OSError as err:
        raise OSError(f"cannot write image {path}: {err}") from err


def make_grid(images: np.ndarray, ncol: int | None = None) -> np.ndarray:
    """Tile ``[n, ch, h, w]`` images into one ``[ch, rows*h, ncol*w]`` image, no padding."""
    n, ch, h, w = images.shape
    ncol = ncol or int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    grid = np.zeros((ch, nrow * h, ncol * w), dtype=images.dtype)
    for i in range(n):
        r, c = divmod(i, ncol)
        grid[:, r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i]
    return grid
