"""Named-tensor container.

Layout: magic ``GFT1``, u32 header length, UTF-8 JSON header, then the
concatenated little-endian tensor bytes. The header is
``{"tensors": [{"name", "dtype", "shape", "offset"}], "meta": {...}}`` with
offsets relative to the start of the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GFT1"
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "|u1"}
_NAMES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def to_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        key = _NAMES.get(arr.dtype.newbyteorder("="))
        if key is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen])
    base = 8 + hlen
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=base + e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return out, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())
