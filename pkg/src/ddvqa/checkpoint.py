"""Single-file tensor container.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header
mapping each tensor name to ``{shape, dtype, offset, length}``, then the raw
little-endian buffers. Offsets are relative to the first byte after the header.
Model weights are written as ``f4``; training state that must resume exactly
is written as ``f8``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def save_tensors(path, tensors: Mapping[str, np.ndarray], dtype: str = "f4") -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    header = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_DTYPES[dtype])
        raw = arr.tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container back as float64 arrays."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", buf[:8])
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    out = {}
    for name, meta in header.items():
        start = base + meta["offset"]
        raw = buf[start:start + meta["length"]]
        if len(raw) != meta["length"]:
            raise ValueError(f"{path}: tensor {name!r} truncated")
        arr = np.frombuffer(raw, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"])
        out[name] = arr.astype(np.float64)
    return out


def read_header(path) -> dict:
    with Path(path).open("rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))
