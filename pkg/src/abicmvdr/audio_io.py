"""WAV and JSON sidecar I/O. Files are written to a temporary name and renamed."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = ["read_wav", "write_wav", "write_json", "read_json", "atomic_path"]

MAX_CHANNELS = 16


class atomic_path:
    """Context manager yielding a temp path that replaces ``path`` on clean exit."""

    def __init__(self, path, suffix=""):
        self.path = Path(path)
        self.suffix = suffix

    def __enter__(self) -> Path:
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".tmp-", suffix=self.suffix or self.path.suffix)
        os.close(fd)
        self.tmp = Path(tmp)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            self.tmp.unlink(missing_ok=True)
        return False


def read_wav(path, expected_rate: int | None = 16000) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM or 32-bit float WAV as float64 [M x L] scaled to [-1, 1]."""
    rate, data = wavfile.read(path)
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resampling not supported)")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    x = x[:, None] if x.ndim == 1 else x
    if x.shape[1] > MAX_CHANNELS:
        raise ValueError(f"{path}: {x.shape[1]} channels exceeds {MAX_CHANNELS}")
    return np.ascontiguousarray(x.T), rate


def write_wav(path, signal, rate: int = 16000, fmt: str = "float32") -> None:
    x = np.asarray(signal, dtype=np.float64)
    x = x[None] if x.ndim == 1 else x
    if not 1 <= x.shape[0] <= MAX_CHANNELS:
        raise ValueError(f"channel count {x.shape[0]} outside 1..{MAX_CHANNELS}")
    if fmt == "float32":
        data = x.T.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(x.T * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    with atomic_path(path) as tmp:
        wavfile.write(tmp, rate, data)


def write_json(path, obj) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))


def read_json(path):
    return json.loads(Path(path).read_text())
