"""Deterministic binary checkpoints: JSON meta plus named raw arrays.

Layout (little-endian): magic, version u32, meta-length u32, meta JSON
(sorted keys), array count u32, then per array sorted by name:
name (u16 length + utf8), dtype string (u8 length + ascii), ndim u8,
dims u32 each, payload u64 length + raw C-order bytes. No timestamps or
other ambient state, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDCHKPT1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path, meta: dict, arrays: dict) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(meta_raw)))
    parts.append(meta_raw)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")  # keeps 0-d shapes intact
        nb = name.encode()
        dt = arr.dtype.str.encode()  # e.g. b"<f4"
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", len(dt)))
        parts.append(dt)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        raw = arr.tobytes()
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    Path(path).write_bytes(b"".join(parts))


def load(path):
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 8
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    try:
        meta = json.loads(buf[off : off + mlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt meta: {e}") from None
    off += mlen
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        (dlen,) = struct.unpack_from("<B", buf, off)
        off += 1
        dtype = np.dtype(buf[off : off + dlen].decode())
        off += dlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                     offset=off).reshape(shape).copy()
        off += nbytes
    return meta, arrays
