"""Versioned binary container for named float64 tensors.

Layout (all integers little-endian int64, floats little-endian float64):

    magic "RATN" | format version | records...
    record: name length | UTF-8 name | rank | dims... | row-major data

Round-trips are bit-exact; loading validates magic and version.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RATN"
FORMAT_VERSION = 1

_I64 = struct.Struct("<q")


class CheckpointError(IOError):
    """Malformed or truncated checkpoint container."""


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_I64.pack(FORMAT_VERSION))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(_I64.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_I64.pack(arr.ndim))
            for dim in arr.shape:
                fh.write(_I64.pack(dim))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path} is not a tensor container (bad magic)")
        version = _I64.unpack(_read_exact(fh, 8))[0]
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        while True:
            head = fh.read(8)
            if not head:
                break
            name_len = _I64.unpack(head)[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            rank = _I64.unpack(_read_exact(fh, 8))[0]
            dims = [_I64.unpack(_read_exact(fh, 8))[0] for _ in range(rank)]
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
            out[name] = data.astype(np.float64).reshape(dims)
    return out
