"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"MEINCKPT"
    u32       format version
    u64       header length n
    n bytes   UTF-8 JSON header: {"stage", "config", "meta",
              "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    payload   raw little-endian tensor bytes; offsets are relative to here

Every tensor is stored bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MEINCKPT"
VERSION = 1
STAGES = ("expert", "imitators", "mixture")
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointStageError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = VERSION

    def require_stage(self, *stages: str) -> "Checkpoint":
        if self.stage not in stages:
            raise CheckpointStageError(f"expected a checkpoint from stage {' or '.join(stages)}, "
                                       f"found stage {self.stage!r}")
        return self

    def require_config(self, expected: Mapping[str, Any], keys=None) -> "Checkpoint":
        keys = expected.keys() if keys is None else keys
        diff = [k for k in keys if self.config.get(k) != expected.get(k)]
        if diff:
            detail = ", ".join(f"{k}: saved {self.config.get(k)!r} vs {expected.get(k)!r}" for k in diff)
            raise CheckpointConfigError(f"checkpoint config does not match ({detail})")
        return self

    def require_shapes(self, expected: Mapping[str, tuple[int, ...]], prefix: str = "") -> "Checkpoint":
        for name, shape in expected.items():
            key = prefix + name
            if key not in self.tensors:
                raise CheckpointShapeError(f"checkpoint has no tensor {key!r}")
            if self.tensors[key].shape != tuple(shape):
                raise CheckpointShapeError(f"{key}: checkpoint shape {self.tensors[key].shape}, "
                                           f"model expects {tuple(shape)}")
        return self

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    if ckpt.stage not in STAGES:
        raise ValueError(f"unknown stage tag {ckpt.stage!r}; expected one of {STAGES}")
    table, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str,
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"stage": ckpt.stage, "config": ckpt.config, "meta": ckpt.meta, "tensors": table},
                        sort_keys=True, allow_nan=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: truncated inside the file prefix")
    _, version, header_len = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads version {VERSION}")
    start = _PREFIX.size + header_len
    if len(raw) < start:
        raise CheckpointTruncatedError(f"{path}: truncated inside the header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NotACheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = memoryview(raw)[start:]
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointTruncatedError(f"{path}: tensor {entry['name']!r} extends past the end of the file")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    return Checkpoint(stage=header["stage"], tensors=tensors, config=header["config"], meta=header["meta"],
                      version=version)
