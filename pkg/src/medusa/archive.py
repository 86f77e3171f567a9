"""Flat binary archive of named float64 arrays.

Layout::

    b"MEDUSAAR"                 magic, 8 bytes
    uint32 LE                   format version
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON: {"manifest": [{"name", "shape", "offset"}...], "meta": {...}}
    payload                     concatenated little-endian float64 data, in manifest order

The header is serialized with sorted keys and fixed separators so that equal
contents always produce equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from medusa.errors import CheckpointVersionError

MAGIC = b"MEDUSAAR"
VERSION = 1
_LE_F8 = np.dtype("<f8")


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_LE_F8).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"manifest": manifest, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(header)), header, *chunks])


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointVersionError("not a medusa archive (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointVersionError(f"archive format version {version}, reader supports {VERSION}")
    header = json.loads(blob[20 : 20 + hlen])
    base = 20 + hlen
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(blob, dtype=_LE_F8, count=count, offset=start).reshape(shape).astype(np.float64)
    return arrays, header["meta"]


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def raw_bytes(arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, bytes]:
    """Per-entry payload bytes, optionally restricted to names under ``prefix``."""
    return {
        n: np.ascontiguousarray(a, dtype=_LE_F8).tobytes() for n, a in arrays.items() if n.startswith(prefix)
    }
