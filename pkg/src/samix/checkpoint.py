"""Binary tensor-table checkpoints.

Layout (all little-endian)::

    b"SMXCKPT1"  u32 version
    repeated:    u32 name_len, name (UTF-8), u32 ndim, u32 dims[ndim], f64 data
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .data import atomic_write_bytes

MAGIC = b"SMXCKPT1"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} at byte offset {offset}")


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int):
        self.found = found
        super().__init__(f"unsupported checkpoint version {found} (expected {VERSION})")


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, expected, found):
        self.name = name
        super().__init__(f"tensor '{name}': expected shape {expected}, found {found}")


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointVersionError(version)
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, f"rank of '{name}'"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of '{name}'"))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(8 * count, f"data of '{name}'"), dtype="<f8")
        out[name] = data.astype(np.float64).reshape(dims)
    return out


def save_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(tensors))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


def load_into(path: str | os.PathLike, expected: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Read a checkpoint and check names and shapes against ``expected``."""
    found = load_tensors(path)
    for name, ref in expected.items():
        if name not in found:
            raise CheckpointShapeError(name, ref.shape, None)
        if found[name].shape != ref.shape:
            raise CheckpointShapeError(name, ref.shape, found[name].shape)
    for name in found:
        if name not in expected:
            raise CheckpointShapeError(name, None, found[name].shape)
    return found


def save_mixer(mixer, path) -> None:
    save_tensors(path, mixer.state())


def load_mixer(path, mixer):
    """Load into an already-configured ``MixerParams``; returns it."""
    mixer.load_state(load_into(path, mixer.state()))
    return mixer


def save_encoder(encoder, path) -> None:
    save_tensors(path, encoder.state())


def load_encoder(path, encoder):
    encoder.load_state(load_into(path, encoder.state()))
    return encoder
