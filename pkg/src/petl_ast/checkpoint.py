"""Flat binary record files for parameters and cached datasets.

Layout (all integers little-endian)::

    magic   8 bytes  b"PETLCKPT"
    version u32
    count   u32
    count x record:
        id_len u16, id (utf-8)
        ndim   u8,  dims u32 * ndim
        data   float64 little-endian, row-major
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PETLCKPT"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_records(path, records: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for pid, arr in records.items():
            arr = np.ascontiguousarray(arr, dtype=_LE_F64)
            name = pid.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def load_records(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        return _parse_body(raw, count)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None


def _parse_body(raw: bytes, count: int) -> dict[str, np.ndarray]:
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        pid = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype=_LE_F64, count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[pid] = arr.astype(np.float64)
    if pos != len(raw):
        raise ValueError(f"{len(raw) - pos} trailing bytes")
    return out


def store_records(store, ids=None) -> dict[str, np.ndarray]:
    ids = store.entries.keys() if ids is None else ids
    return {pid: np.array(store[pid].data) for pid in ids}


def load_into(store, records: Mapping[str, np.ndarray], strict: bool = True) -> None:
    for pid, arr in records.items():
        if pid not in store:
            if strict:
                raise CheckpointError(f"unknown parameter id {pid!r}")
            continue
        t = store[pid]
        if t.shape != arr.shape:
            raise CheckpointError(f"{pid}: shape {arr.shape} does not match {t.shape}")
        t.data[...] = arr


def params_digest(store, ids) -> str:
    """SHA-256 over the raw bytes of the given parameters, in id order."""
    h = hashlib.sha256()
    for pid in sorted(ids):
        h.update(pid.encode("utf-8"))
        h.update(np.ascontiguousarray(store[pid].data, dtype=_LE_F64).tobytes())
    return h.hexdigest()
