"""Checkpoint file: magic, little-endian u64 header length, JSON header, raw arrays.

The header lists every parameter with its name, shape, trainable flag,
dtype (always little-endian) and byte offset into the trailing blob.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"OPFTCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, named_params, meta=None):
    entries = []
    chunks = []
    offset = 0
    for name, p in named_params:
        arr = np.ascontiguousarray(p.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name, "shape": list(arr.shape), "trainable": bool(p.trainable),
            "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format": FORMAT_VERSION, "meta": meta or {}, "params": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (meta, {name: (array, trainable)})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    if header.get("format") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    base = 16 + hlen
    params = {}
    for e in header["params"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise FormatError(f"{path}: blob truncated at parameter {e['name']!r}")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)),
                            offset=start).reshape(e["shape"])
        params[e["name"]] = (arr.astype(arr.dtype.newbyteorder("="), copy=True), e["trainable"])
    return header["meta"], params


def restore_parameters(named_params, params, strict=True):
    for name, p in named_params:
        if name not in params:
            if strict:
                raise FormatError(f"checkpoint has no parameter {name!r}")
            continue
        arr, trainable = params[name]
        if arr.shape != p.data.shape:
            raise FormatError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr
        p.trainable = trainable
