"""Binary weight container.

Layout: ``b"ABIC"``, version (u32 LE), index length (u32 LE), UTF-8 JSON index,
then raw little-endian float32 payloads. The index holds the architecture and,
per tensor, ``name``, ``group`` (params/buffers), ``dtype``, ``shape`` and the
byte ``offset`` into the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .audio_io import atomic_path
from .igcrn import IgcrnConfig, ModelWeights

__all__ = ["save_weights", "load_weights", "CorruptContainerError", "UnknownVersionError", "MAGIC", "VERSION"]

MAGIC = b"ABIC"
VERSION = 1


class CorruptContainerError(ValueError):
    pass


class UnknownVersionError(ValueError):
    pass


def save_weights(weights: ModelWeights, path) -> None:
    weights.validate()
    entries, chunks, offset = [], [], 0
    for group in ("params", "buffers"):
        for name, value in getattr(weights, group).items():
            data = np.ascontiguousarray(value, dtype="<f4").tobytes()
            entries.append({"name": name, "group": group, "dtype": "f32", "shape": list(np.shape(value)), "offset": offset})
            chunks.append(data)
            offset += len(data)
    index = json.dumps({"arch": weights.arch.to_dict(), "tensors": entries, "payload_bytes": offset}).encode()
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", VERSION, len(index)) + index)
            for chunk in chunks:
                fh.write(chunk)


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptContainerError(f"{path}: corrupt container (bad magic)")
    version, index_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise UnknownVersionError(f"{path}: unknown container version {version}")
    if 12 + index_len > len(raw):
        raise CorruptContainerError(f"{path}: corrupt container (truncated index)")
    try:
        index = json.loads(raw[12:12 + index_len].decode())
        arch = IgcrnConfig(**index["arch"])
        entries = index["tensors"]
    except (ValueError, KeyError, TypeError) as err:
        raise CorruptContainerError(f"{path}: corrupt container ({err})") from None
    payload = raw[12 + index_len:]
    if len(payload) != index.get("payload_bytes", len(payload)):
        raise CorruptContainerError(f"{path}: corrupt container (payload is {len(payload)} bytes, index says {index.get('payload_bytes')})")
    weights = ModelWeights(arch)
    for e in entries:
        if e.get("dtype") != "f32" or e.get("group") not in ("params", "buffers"):
            raise CorruptContainerError(f"{path}: corrupt container (bad entry for {e.get('name')!r})")
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start, stop = e["offset"], e["offset"] + 4 * count
        if start < 0 or stop > len(payload):
            raise CorruptContainerError(f"{path}: corrupt container (tensor {e['name']!r} out of bounds)")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(e["shape"]).copy()
        getattr(weights, e["group"])[e["name"]] = arr
    weights.validate()
    return weights
