"""Binary tensor container used for checkpoints and feature caches.

Layout (all integers little-endian)::

    magic      8 bytes  b"DDTENSOR"
    version    1 byte   (currently 1)
    header     u64 length + UTF-8 JSON object (sorted keys)
    count      u64 number of entries
    entry*     u64 name length, UTF-8 name, u64 rank, rank x u64 dims,
               prod(dims) x float32 row-major

Entries are written in sorted name order so identical contents give
identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

MAGIC = b"DDTENSOR"
VERSION = 1

PathLike = Union[str, Path]


class ContainerError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray], header: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    hdr = json.dumps(dict(header or {}), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<Q", len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<Q", len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise ContainerError("bad magic string; not a tensor container")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(bytes(take(hlen)).decode("utf-8"))
    (count,) = struct.unpack("<Q", take(8))
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(dims).astype(np.float32)
        if name in entries:
            raise ContainerError(f"duplicate entry '{name}'")
        entries[name] = arr
    if pos != len(view):
        raise ContainerError("trailing bytes after last entry")
    return entries, header


def save(path: PathLike, entries: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(entries, header))


def load(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
