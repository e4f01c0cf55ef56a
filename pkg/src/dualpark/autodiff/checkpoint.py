"""Flat named-array checkpoint files.

Layout (all integers little-endian)::

    8 bytes   magic  b"DPCKPT\\x00\\x01"
    u32       length of the UTF-8 JSON metadata block
    bytes     metadata JSON (free-form object)
    u32       number of arrays
    per array:
        u16     name length, then the UTF-8 name
        u8      ndim, then ndim x u64 extents
        f64[]   prod(extents) values, row-major, little-endian

See docs/formats.md for the versioning policy.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPCKPT\x00\x01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    try:
        return _parse(buf, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse(buf: bytes, path) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return arrays, meta
