"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header, then raw little-endian tensor blobs concatenated in
header index order. The index lists model parameters in
TransformerWeights.named_parameters() order followed by extra blobs in
sorted name order, so save/load round-trips are bitwise identities.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .model import ModelConfig, TransformerWeights

MAGIC = b"DRFTLAB\x00"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: TransformerWeights
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, weights: TransformerWeights,
                    extras: Optional[dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> None:
    extras = extras or {}
    dtype_name = str(weights.dtype)
    entries = []
    blobs = []
    for name, t in weights.named_parameters():
        entries.append({"name": f"model.{name}", "dtype": str(t.data.dtype),
                        "shape": list(t.shape)})
        blobs.append(np.ascontiguousarray(t.data.astype(_DTYPES[str(t.data.dtype)])).tobytes())
    for name in sorted(extras):
        arr = np.ascontiguousarray(extras[name])
        if str(arr.dtype) not in _DTYPES:
            raise CheckpointError(f"unsupported extra dtype {arr.dtype} for {name}")
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.astype(_DTYPES[str(arr.dtype)]).tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(weights.config),
        "dtype": dtype_name,
        "seed": weights.config.seed,
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    config = ModelConfig(**header["config"])
    weights = TransformerWeights(config, dtype=np.dtype(header["dtype"]))
    params = dict(weights.named_parameters())
    extras: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.dtype(dtype).itemsize * int(np.prod(shape, dtype=np.int64)))
        arr = np.frombuffer(raw[off : off + nbytes], dtype=dtype).reshape(shape)
        arr = arr.astype(entry["dtype"], copy=True)
        off += nbytes
        name = entry["name"]
        if name.startswith("model."):
            params[name[len("model."):]].data = arr
        else:
            extras[name] = arr
    return Checkpoint(config=config, weights=weights, extras=extras, meta=header["meta"])


def file_checksum(path) -> str:
    import hashlib
    from pathlib import Path

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
