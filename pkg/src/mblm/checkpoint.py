"""Versioned binary container for named fp32 arrays plus a JSON document.

Layout (all integers little-endian)::

    b"MBLMCKPT" | u32 version | u32 header length | header JSON (utf-8) | raw '<f4' data

The header lists ``{"name", "shape", "offset"}`` per entry (offsets into the data area)
and carries the free-form ``document`` (model config, trainer state, ...).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MBLMCKPT"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_container(path: str | Path, arrays: dict[str, np.ndarray], document: dict) -> None:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_LE_F32)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"entries": entries, "document": document}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not an MBLM checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = (
            np.frombuffer(raw, dtype=_LE_F32, count=count, offset=start).reshape(e["shape"]).astype(np.float32)
        )
    return arrays, header["document"]


def save_model(path: str | Path, model, meta: dict | None = None) -> None:
    save_container(path, model.state_dict(), {"config": model.config.to_dict(), "meta": meta or {}})


def load_model(path: str | Path):
    from .model import MblmModel, ModelConfig

    arrays, doc = load_container(path)
    model = MblmModel(ModelConfig.from_dict(doc["config"]))
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("~")})
    return model
