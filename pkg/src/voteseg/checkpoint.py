"""Checkpoint serialization: named float32 arrays with a JSON index.

Layout: an 8-byte little-endian u64 holding the JSON header length,
the UTF-8 header itself, then the raw array payloads back to back.
The header maps each array name to its shape and byte offset within
the payload region and carries an optional `meta` object. Writing the
same arrays twice produces identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    """Malformed checkpoint file or inconsistent index."""


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    index: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float32))
        raw = a.astype("<f4", copy=False).tobytes()
        index[name] = {"shape": list(a.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": index, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header length field")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad JSON header: {e}") from e
    if not isinstance(header, dict) or "arrays" not in header:
        raise CheckpointError(f"{path}: header missing 'arrays' index")
    payload = blob[8 + hlen:]
    out: dict[str, np.ndarray] = {}
    for name, entry in header["arrays"].items():
        shape = tuple(int(s) for s in entry["shape"])
        off = int(entry["offset"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: array '{name}' extends past end of file")
        a = np.frombuffer(payload[off:end], dtype="<f4").reshape(shape)
        out[name] = np.array(a, dtype=np.float32)  # writable copy
    return out, header.get("meta", {})
