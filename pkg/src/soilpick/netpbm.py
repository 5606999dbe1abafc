"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) array")
    data = rgb if rgb.dtype == np.uint8 else np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


def write_pgm(path, gray: np.ndarray, scale: int = 255) -> None:
    """Binary masks are stored as 0/255 unless ``scale`` says otherwise."""
    g = np.asarray(gray)
    if g.ndim != 2:
        raise ValueError("PGM needs an (H, W) array")
    data = g.astype(np.uint8) * np.uint8(scale) if g.dtype == bool or g.max(initial=0) <= 1 else g.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


def _read_header(buf: bytes):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    return tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def read_netpbm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, w, h, maxval, off = _read_header(buf)
    if maxval > 255:
        raise ValueError("only 8-bit netpbm files are supported")
    if magic == b"P6":
        return np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()
    if magic == b"P5":
        return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()
    raise ValueError(f"unsupported netpbm magic {magic!r}")


def read_ppm(path) -> np.ndarray:
    """RGB as float32 in [0, 1]."""
    return read_netpbm(path).astype(np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    return (read_netpbm(path) > 0).astype(np.uint8)
