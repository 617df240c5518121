"""Versioned, byte-stable checkpoint container.

Layout::

    b"SSLCKPT\\n"                       magic
    b"<version>\\n"                     format version (ASCII int)
    <8-byte little-endian header length>
    <header JSON, sorted keys>          {"arrays": [{path, shape, offset}], "meta": {...}}
    <payload>                           little-endian float64, row-major, arrays in path order

Array paths are grouped by prefix: ``params/...``, ``buffers/...``,
``optim/<group>/...`` and ``ema/...``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SSLCKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = []
    offset = 0
    chunks = []
    for key in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[key], dtype="<f8"))
        entries.append({"path": key, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(f"{VERSION}\n".encode())
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    nl = raw.index(b"\n", pos)
    version = int(raw[pos:nl])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = nl + 1
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(e["shape"])
        arrays[e["path"]] = arr.astype(np.float64)
    return arrays, header["meta"]


def save_checkpoint(path, model, optimizers: Mapping | None = None, ema=None, meta: Mapping | None = None) -> None:
    """Write a model's parameters and buffers plus optional optimizer and EMA state."""
    arrays = {f"params/{k}": p.data for k, p in model.named_parameters()}
    arrays.update({f"buffers/{k}": b for k, b in model.named_buffers()})
    for name, opt in (optimizers or {}).items():
        arrays.update(opt.state_arrays(f"optim/{name}"))
    if ema is not None:
        arrays.update({f"ema/{k}": v for k, v in ema.shadow.items()})
        meta = dict(meta or {}, ema_decay=ema.decay)
    save_arrays(path, arrays, meta)


def split_groups(arrays: Mapping[str, np.ndarray]) -> dict[str, dict[str, np.ndarray]]:
    """Split flat checkpoint arrays into {'params': ..., 'buffers': ..., 'ema': ..., 'optim': ...}."""
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "buffers": {}, "ema": {}, "optim": {}}
    for k, v in arrays.items():
        head, rest = k.split("/", 1)
        groups.setdefault(head, {})[rest] = v
    return groups
