"""Checkpoint container.

Layout::

    MAGIC (16 bytes) | header length (uint64 LE) | header JSON (utf-8, sorted keys)
    | payload: float64 LE tensors, row-major, in header order

The header records the model kind, hyperparameters and a tensor table of
(name, shape, offset in float64 units).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import Params

MAGIC = b"BRIDGETRACE-CK01"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def dumps(params: Params, kind: str, hyper: dict) -> bytes:
    names = sorted(params)
    table = []
    offset = 0
    for name in names:
        arr = np.asarray(params[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in {name}")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {"format_version": FORMAT_VERSION, "kind": kind, "hyper": hyper, "tensors": table}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def loads(blob: bytes) -> tuple[Params, dict]:
    if blob[:16] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[16:24])
    header = json.loads(blob[24:24 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    data = np.frombuffer(blob, dtype="<f8", offset=24 + hlen)
    params = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=int))
        chunk = data[entry["offset"]:entry["offset"] + size]
        if chunk.size != size:
            raise CheckpointError(f"truncated tensor {entry['name']}")
        params[entry["name"]] = chunk.astype(np.float64).reshape(entry["shape"])
    return params, header


def save(path: Path, params: Params, kind: str, hyper: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(params, kind, hyper))


def load(path: Path, kind: str | None = None) -> tuple[Params, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    params, header = loads(blob)
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path} holds a {header['kind']!r} model, expected {kind!r}")
    return params, header
