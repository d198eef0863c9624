"""Self-describing checkpoint files.

Layout::

    b"MIPCKPT\\n"                 8-byte magic
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON: version, model config, n_items,
                                 and for every parameter its name, shape,
                                 trainable flag and byte offset into the data
    data                         parameter blobs, little-endian float64, C order

Offsets are relative to the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import MIPModel

MAGIC = b"MIPCKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: MIPModel, extra: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.value.shape), "trainable": p.trainable, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": VERSION,
        "config": model.cfg.model_dump(mode="json"),
        "n_items": model.n_items,
        "frozen_weights": model.frozen_weights,
        "params": entries,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + n].decode())
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != supported {VERSION}")
    return header, data[start + n :]


def load_checkpoint(path) -> tuple[MIPModel, dict]:
    """Rebuild the model; returns (model, extra metadata)."""
    header, body = read_header(path)
    cfg = ModelConfig.model_validate(header["config"])
    shapes = {e["name"]: e for e in header["params"]}
    features = None
    if "item.features" in shapes:
        e = shapes["item.features"]
        features = _blob(body, e)
    model = MIPModel(cfg, header["n_items"], features=features)
    if set(shapes) != set(model.params):
        raise CheckpointError(f"{path}: parameter set does not match the model config")
    for name, e in shapes.items():
        p = model.params[name]
        p.value = _blob(body, e)
        p.grad = np.zeros_like(p.value)
        p.reset_moments()
        p.trainable = bool(e["trainable"])
    model.frozen_weights = bool(header.get("frozen_weights", False))
    return model, header.get("extra", {})


def _blob(body: bytes, e: dict) -> np.ndarray:
    shape = tuple(e["shape"])
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
    return arr.astype(np.float64).reshape(shape)
