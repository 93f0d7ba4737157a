"""Single-file checkpoint container.

Layout: one JSON manifest line mapping tensor name -> (shape, dtype, byte
offset), a newline, then the raw little-endian float32 payloads
concatenated in manifest order. Offsets are relative to the payload start.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_MAGIC = "tritrack-weights-v1"


def save_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    manifest = {"format": _MAGIC, "tensors": []}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest["tensors"].append(
            {
                "name": name,
                "shape": list(data.shape),
                "dtype": "float32",
                "offset": offset,
            }
        )
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format") != _MAGIC:
        raise ValueError(f"{path}: not a weight file")
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out
