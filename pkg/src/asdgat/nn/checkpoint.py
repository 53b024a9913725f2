"""Checkpoint container.

Layout::

    b"ASDGATCK"                       8-byte magic
    uint64 little-endian              header length in bytes
    header                            UTF-8 JSON: {"config": ..., "tensors": [{name, shape, offset}], ...}
    payload                           float64 little-endian arrays, in header order

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .models import GraphClassifier, ModelConfig

MAGIC = b"ASDGATCK"


def save_checkpoint(model: GraphClassifier, path, extra: dict | None = None) -> None:
    state = model.state()
    directory, offset = [], 0
    for name, arr in state.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"config": model.config.to_dict(), "tensors": directory, "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        start = base + t["offset"]
        tensors[t["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(t["shape"]).astype(np.float64)
    return header, tensors


def load_checkpoint(path) -> tuple[GraphClassifier, dict]:
    header, tensors = read_checkpoint(path)
    model = GraphClassifier(ModelConfig(**header["config"]), rng=0)
    model.load_state(tensors)
    return model, header.get("extra", {})
