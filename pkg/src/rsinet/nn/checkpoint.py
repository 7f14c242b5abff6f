"""Binary tensor container.

Layout (all integers little-endian)::

    b"RSIN"            magic
    u16                format version
    u32 + bytes        UTF-8 JSON metadata (sorted keys)
    u32                entry count
    per entry:
      u16 + bytes      UTF-8 name
      u8               ndim
      u64 * ndim       extents
      f64 * prod       row-major payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"RSIN"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    write(buf, tensors, metadata)
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    return read(io.BytesIO(blob))


def write(fh: BinaryIO, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<H", FORMAT_VERSION))
    fh.write(struct.pack("<I", len(meta)))
    fh.write(meta)
    fh.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def _take(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError("truncated checkpoint")
    return data


def read(fh: BinaryIO) -> tuple[dict[str, np.ndarray], dict]:
    if _take(fh, 4) != MAGIC:
        raise CheckpointFormatError("not an RSIN checkpoint (bad magic)")
    (version,) = struct.unpack("<H", _take(fh, 2))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", _take(fh, 4))
    metadata = json.loads(_take(fh, meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", _take(fh, 4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _take(fh, 2))
        name = _take(fh, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", _take(fh, 1))
        shape = struct.unpack(f"<{ndim}Q", _take(fh, 8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        payload = np.frombuffer(_take(fh, 8 * n), dtype="<f8").astype(np.float64)
        tensors[name] = payload.reshape(shape)
    if fh.read(1):
        raise CheckpointFormatError("trailing bytes after last entry")
    return tensors, metadata


def save(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
