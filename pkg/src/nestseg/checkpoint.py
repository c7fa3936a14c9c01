"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"NSEGCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 manifest length M
    M bytes   UTF-8 JSON manifest (sorted keys, compact separators)
    ...       raw array bytes, concatenated in manifest order

The manifest holds ``arrays``: a list of ``{name, dtype, shape, offset,
nbytes}`` with offsets relative to the start of the array section, and
``meta``: free-form JSON (configs, step counter, training log).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"NSEGCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def encode(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = _le(np.asarray(arr))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                          separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if start > len(blob):
        raise CheckpointError("manifest extends past end of file")
    manifest = json.loads(blob[_HEADER.size:start].decode())
    arrays: dict[str, np.ndarray] = {}
    end = start
    for e in manifest["arrays"]:
        lo, hi = start + e["offset"], start + e["offset"] + e["nbytes"]
        if lo != end or hi > len(blob):
            raise CheckpointError(f"array {e['name']}: offset inconsistent with file layout")
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(blob, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
        end = hi
    if end != len(blob):
        raise CheckpointError(f"{len(blob) - end} trailing bytes after the last array")
    return arrays, manifest["meta"]


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return decode(blob)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
