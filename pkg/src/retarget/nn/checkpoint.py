"""Checkpoint container: one JSON header line + float32 little-endian payload.

The header carries arbitrary metadata plus the ordered segment table
(name and shape per array); the payload is the segments' raw float32
data concatenated in table order. The format is self-contained and
trivially readable from any language.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_checkpoint(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    segments = []
    blobs = []
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        segments.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr32.tobytes())
    header = dict(meta)
    header["segments"] = segments
    header["dtype"] = "f32le"
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("dtype") != "f32le":
            raise ValueError(f"unsupported checkpoint dtype in {path}")
        arrays = {}
        for seg in header["segments"]:
            shape = tuple(seg["shape"])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 4)
            if len(payload) != count * 4:
                raise ValueError(f"truncated checkpoint payload in {path}")
            arrays[seg["name"]] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    meta = {k: v for k, v in header.items() if k not in ("segments", "dtype")}
    return meta, arrays
