"""Flat binary archive of named float64 arrays.

Layout (all integers little-endian)::

    b"MDMLCKPT"                 magic, 8 bytes
    u32 version                 FORMAT_VERSION
    u64 header_len, bytes       UTF-8 JSON header (model config, tag ranges, ...)
    u64 n_entries
    per entry:
        u32 name_len, bytes     UTF-8 parameter path, e.g. "dec.1.ffn.w1"
        u32 ndim, u64 * ndim    shape
        f64 * prod(shape)       row-major payload, '<f8'

Entries are written in sorted name order so identical contents give identical
files.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MDMLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict, header: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    hdr = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<Q", len(arrays)))
    for name in sorted(arrays):
        arr = np.array(arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict, dict]:
    try:
        return _parse(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _parse(blob: bytes) -> tuple[dict, dict]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not an mdml checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
    pos += hlen
    (n,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    arrays = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        arrays[name] = arr.astype(np.float64, copy=True)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return arrays, header


def save(path, arrays: dict, header: dict | None = None):
    Path(path).write_bytes(dumps(arrays, header))


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())
