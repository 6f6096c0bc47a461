"""UDVLA01 tensor-table files.

Layout (little-endian): 8 magic bytes ``b"UDVLA01\\0"``, then per entry
``u32 name_len``, utf-8 name, ``u32 rank``, ``u32 * rank`` dims and
``f64 * prod(dims)`` payload in row-major order, then a trailing ``u64``
entry count.
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"UDVLA01\0"


class CheckpointFormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    buf.write(struct.pack("<Q", len(tensors)))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    if len(blob) < 16:
        raise CheckpointFormatError("truncated file")
    (count,) = struct.unpack("<Q", blob[-8:])
    pos, end = 8, len(blob) - 8
    out: dict[str, np.ndarray] = {}
    while pos < end:
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        out[name] = arr.astype(np.float64)
    if pos != end or len(out) != count:
        raise CheckpointFormatError(f"entry count {len(out)} does not match trailer {count}")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
