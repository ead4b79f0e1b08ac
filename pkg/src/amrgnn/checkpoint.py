"""Model checkpoints.

Layout (little-endian)::

    magic        8 bytes  b"AMRCKPT\\x01"
    header_len   u64
    header       UTF-8 JSON: architecture, feature scales, seed, free-form
                 metadata and a parameter index [{name, shape, offset}]
    payload      float64 parameter values, concatenated in index order
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .graph import FeatureScales
from .model import ArchitectureConfig, MultiscaleModel
from .records import atomic_write

MAGIC = b"AMRCKPT\x01"


class CheckpointFormatError(ValueError):
    pass


def checkpoint_bytes(model: MultiscaleModel, meta: dict | None = None) -> bytes:
    arrays = model.state_arrays()
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "arch": model.config.to_dict(),
        "scales": model.scales.to_dict(),
        "seed": model.seed,
        "meta": meta or {},
        "params": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(model: MultiscaleModel, path: str | os.PathLike, meta: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(model, meta))


def read_checkpoint(data: bytes) -> tuple[MultiscaleModel, dict]:
    if data[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    payload = np.frombuffer(data, dtype="<f8", offset=16 + n)
    model = MultiscaleModel.init(ArchitectureConfig.from_dict(header["arch"]),
                                 FeatureScales(**header["scales"]), header["seed"])
    arrays = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > payload.size:
            raise CheckpointFormatError(f"payload too short for {entry['name']}")
        arrays[entry["name"]] = payload[start:start + size].reshape(entry["shape"])
    model.load_arrays(arrays)
    return model, header["meta"]


def load_checkpoint(path: str | os.PathLike) -> tuple[MultiscaleModel, dict]:
    return read_checkpoint(Path(path).read_bytes())
