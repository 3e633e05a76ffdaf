"""SLCW binary weights files.

Layout, all integers little-endian::

    b"SLCW"  u32 version (=1)  u32 tensor_count
    per tensor:  u16 name_len  name (UTF-8)  u8 ndim  u64 dims[ndim]  f32 payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagicError, TruncatedFileError, UnsupportedVersionError, WeightsFormatError

MAGIC = b"SLCW"
VERSION = 1


def dump_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightsFormatError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 0xFF:
            raise WeightsFormatError(f"{name}: too many dimensions ({a.ndim})")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{a.ndim}Q", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_weights(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file truncated while reading {what} at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported weights version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = bytes(take(name_len, f"tensor {i} name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name} dims"))
        n = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
        payload = take(4 * n, f"{name} payload")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(view):
        raise WeightsFormatError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return out


def save_weights(weights: Mapping[str, np.ndarray], path) -> None:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(dump_weights(weights))
    os.replace(tmp, path)


def load_weights(path) -> dict[str, np.ndarray]:
    return parse_weights(Path(path).read_bytes())
