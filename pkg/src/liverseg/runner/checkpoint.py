"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"SEGB"                      magic
    uint32  version              (1)
    uint32  meta_len
    bytes   meta                 UTF-8 JSON: {"model": ModelConfig, ...extras}
    uint32  n_tensors
    repeated n_tensors times:
        uint16  name_len
        bytes   name             UTF-8
        uint8   ndim
        uint32  extent * ndim
        float64 data             little-endian, row-major

Tensors come in model declaration order: trainable parameters first, then
batch-norm running statistics.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from liverseg.nn.models import Model, ModelConfig, build_model

MAGIC = b"SEGB"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    meta: dict = field(default_factory=dict)


def save_checkpoint(model: Model, path, extras: dict | None = None) -> None:
    meta = {"model": model.config.to_dict(), **(extras or {})}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    named = list(model.named_parameters()) + list(model.named_buffers())
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(named))]
    for name, t in named:
        arr = np.ascontiguousarray(getattr(t, "data", t), dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            state[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None

    model = build_model(ModelConfig.from_dict(meta["model"]))
    expected = [n for n, _ in model.named_parameters()] + [n for n, _ in model.named_buffers()]
    if list(state) != expected:
        raise CheckpointError(f"{path}: tensor names do not match a {model.family} with this config")
    model.load_state_dict(state)
    return Checkpoint(model, meta)
