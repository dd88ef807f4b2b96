"""Binary weight file ("MSIW") reader and writer.

Layout, all little-endian: magic ``MSIW``, u32 version (1), u32 tensor count,
then per tensor a u16 name length, the UTF-8 name, a u8 rank, ``rank`` u32
extents and the row-major f32 values.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MSIW"
VERSION = 1
ENCODER_PREFIX = "encoder/"


class WeightFileError(Exception):
    pass


class WeightFormatError(WeightFileError):
    """Bad magic, unsupported version or truncated payload."""


class UnknownTensorError(WeightFileError):
    pass


class ShapeConflictError(WeightFileError):
    pass


class MissingTensorError(WeightFileError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_tensors(payload: bytes) -> dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", payload, 4)
        if version != VERSION:
            raise WeightFormatError(f"unsupported weight file version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(payload):
                raise WeightFormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise WeightFormatError(f"truncated weight file: {exc}") from exc
    if pos != len(payload):
        raise WeightFormatError(f"{len(payload) - pos} trailing bytes after last tensor")
    return out


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(model, path) -> None:
    atomic_write_bytes(path, encode_tensors({k: v.data for k, v in model.params.items()}))


def load_weights(model, path, encoder_only: bool = False) -> None:
    """Load tensors into ``model`` in place.

    With ``encoder_only`` only ``encoder/*`` tensors are read from the file; the
    rest of the model keeps its current values.
    """
    tensors = decode_tensors(Path(path).read_bytes())
    if encoder_only:
        tensors = {k: v for k, v in tensors.items() if k.startswith(ENCODER_PREFIX)}
        expected = [k for k in model.params if k.startswith(ENCODER_PREFIX)]
    else:
        expected = list(model.params)
    for name, arr in tensors.items():
        if name not in model.params:
            raise UnknownTensorError(f"unknown tensor {name!r} in {path}")
        want = model.params[name].shape
        if tuple(arr.shape) != tuple(want):
            raise ShapeConflictError(
                f"tensor {name!r}: file shape {tuple(arr.shape)} conflicts with model shape {want}"
            )
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise MissingTensorError(f"{len(missing)} tensors missing from {path}, first: {missing[0]!r}")
    for name, arr in tensors.items():
        p = model.params[name]
        p.data = arr.astype(p.dtype)
