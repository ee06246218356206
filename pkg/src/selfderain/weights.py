"""Binary weights file.

Layout (all integers little-endian)::

    b"DRLW"  u16 version  u32 count
    count x { u16 name_len, name (utf-8), u8 rank, rank x u32 extent, float32 data }

Scalars are stored with rank 0 and one float. Model hyperparameters and
checkpoint metadata travel as ordinary entries under the ``meta.`` prefix.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from .autograd import Tensor

MAGIC = b"DRLW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        value = value.data
    return np.asarray(value, dtype="<f4")


def dumps(weights: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(weights)))
    for name, value in weights.items():
        arr = _as_array(value)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightsFormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise WeightsFormatError(f"tensor {name} has rank {arr.ndim}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != VERSION:
            raise WeightsFormatError(f"unsupported weights format version {version}")
        pos = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(view):
                raise WeightsFormatError(f"truncated data for tensor {name}")
            out[name] = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise WeightsFormatError(f"truncated weights file: {exc}") from exc
    if pos != len(view):
        raise WeightsFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save(path: str | os.PathLike, weights: Mapping[str, object]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(weights))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
