"""Single-file archive: JSON header followed by raw little-endian float64 payloads.

Layout::

    b"MOEMBED1" | uint64 LE header length | header JSON (utf-8) | payload

The header carries caller metadata plus a ``tensors`` list of
``{name, shape, offset}`` entries, offsets in bytes from the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MOEMBED1"


class CheckpointError(ValueError):
    pass


def save_archive(path, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    entries, offset = [], 0
    for name, arr in tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = dict(meta)
    header["tensors"] = entries
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(raw)[16 + hlen :]
    tensors = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + 8 * count], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return header, tensors
