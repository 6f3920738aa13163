"""Binary PGM (P5) and PPM (P6) images, maxval 255."""

from __future__ import annotations

import os

import numpy as np

from .data import DataFormatError, atomic_write_bytes


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 by rounding."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    """(H, W) -> P5, (3, H, W) -> P6."""
    img = np.asarray(img)
    if img.ndim == 2:
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(img).tobytes()
    if img.ndim == 3 and img.shape[0] == 3:
        _, h, w = img.shape
        return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(img).transpose(1, 2, 0).tobytes()
    raise ValueError(f"expected (H, W) or (3, H, W) image, got shape {img.shape}")


def write_pnm(path: str | os.PathLike, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(img))


def decode_pnm(buf: bytes) -> np.ndarray:
    """Inverse of ``encode_pnm``; returns floats in [0, 1]."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated header", pos)
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"unsupported magic {magic!r}", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataFormatError("non-numeric header field", pos) from None
    if maxval != 255:
        raise DataFormatError(f"maxval {maxval} unsupported", pos)
    ch = 1 if magic == b"P5" else 3
    need = w * h * ch
    if len(buf) - pos < need:
        raise DataFormatError(f"expected {need} pixel bytes, found {len(buf) - pos}", pos)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).astype(np.float64) / 255.0
    if ch == 1:
        return px.reshape(h, w)
    return px.reshape(h, w, 3).transpose(2, 0, 1)


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def tile_row(tiles: list[np.ndarray], pad: int = 0) -> np.ndarray:
    """Concatenate (3, H, W) or (H, W) tiles left to right."""
    if pad:
        sep = np.ones(tiles[0].shape[:-1] + (pad,))
        joined = []
        for t in tiles:
            joined += [t, sep]
        tiles = joined[:-1]
    return np.concatenate(tiles, axis=-1)
