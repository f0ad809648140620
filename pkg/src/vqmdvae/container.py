"""Portable tensor container.

Each tensor lives in its own ``.ten`` file::

    b"MDT1" | u32 rank | rank * u32 dims | raw float32 data

All integers and floats are little-endian. Writes are atomic (temp file then
rename), so a crashed writer never leaves a half-written tensor behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import TruncatedTensorError, UnrecognizedContainerError

MAGIC = b"MDT1"
_DTYPE = np.dtype("<f4")


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind != "f":
        raise TypeError(f"only floating tensors can be stored, got {arr.dtype}")
    if arr.dtype != np.float32:
        # float64 -> float32 would silently lose bits; refuse rather than round.
        raise TypeError(f"tensor container stores float32 only, got {arr.dtype}")
    arr = np.asarray(arr, dtype=_DTYPE, order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes, name: str = "<tensor>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise UnrecognizedContainerError(f"unrecognized container: {name} does not start with {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * rank
    if len(blob) < head:
        raise TruncatedTensorError(f"truncated tensor {name}: header cut short")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = head + 4 * count
    if len(blob) < expected:
        raise TruncatedTensorError(
            f"truncated tensor {name}: expected {expected} bytes, found {len(blob)}"
        )
    if len(blob) > expected:
        raise TruncatedTensorError(f"tensor {name} has {len(blob) - expected} trailing bytes")
    data = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=head)
    return data.reshape(shape).astype(np.float32)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), name=str(path))


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dump_json(obj))
