"""Binary checkpoint container.

Layout: ``b"OLIV"``, version byte ``0x01``, little-endian u64 manifest length,
UTF-8 JSON manifest ``{config, stage, tensors: [{name, shape, offset}]}``,
then a payload of little-endian float64 values. ``offset`` is a byte offset
into the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig, Olivia, Stage, set_stage

MAGIC = b"OLIV"
VERSION = 1
_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: Stage
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Olivia) -> "Checkpoint":
        tensors = {n: p.detach().numpy().astype(np.float64, copy=True) for n, p in model.named_parameters()}
        return cls(model.config, model.stage, tensors)

    def to_model(self) -> Olivia:
        model = Olivia(self.config)
        params = dict(model.named_parameters())
        if set(params) != set(self.tensors):
            missing = sorted(set(params) ^ set(self.tensors))
            raise CheckpointError(f"tensor set does not match config: {missing[:5]}")
        with torch.no_grad():
            for name, p in params.items():
                arr = self.tensors[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"{name}: shape {arr.shape} != expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr))
        set_stage(model, self.stage)
        return model

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            data = np.ascontiguousarray(arr, dtype=_F64).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(data)
            offset += len(data)
        manifest = {"config": self.config.to_json(), "stage": self.stage.value, "tensors": entries}
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < 13 or raw[:4] != MAGIC:
            raise CheckpointError("bad magic: not an OLIV checkpoint")
        if raw[4] != VERSION:
            raise CheckpointError(f"unsupported version {raw[4]}")
        (mlen,) = struct.unpack("<Q", raw[5:13])
        if 13 + mlen > len(raw):
            raise CheckpointError("truncated manifest")
        try:
            manifest = json.loads(raw[13 : 13 + mlen].decode("utf-8"))
            config = ModelConfig.from_json(manifest["config"])
            stage = Stage(manifest["stage"])
            entries = manifest["tensors"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"invalid manifest: {exc}") from None
        payload = raw[13 + mlen :]
        spans = []
        tensors = {}
        for e in entries:
            shape = tuple(int(s) for s in e["shape"])
            start = int(e["offset"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            if start < 0 or start % 8 or start + nbytes > len(payload):
                raise CheckpointError(f"{e['name']}: offset {start} (+{nbytes}) outside payload of {len(payload)} bytes")
            spans.append((start, start + nbytes, e["name"]))
            tensors[e["name"]] = np.frombuffer(payload, dtype=_F64, count=nbytes // 8, offset=start).reshape(shape).copy()
        spans.sort()
        for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise CheckpointError(f"tensors {n0} and {n1} overlap")
        if len(tensors) != len(entries):
            raise CheckpointError("duplicate tensor names in manifest")
        return cls(config, stage, tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def checkpoint_io(mode: str, path: str | Path, checkpoint: Checkpoint | None = None) -> Checkpoint:
    if mode == "save":
        if checkpoint is None:
            raise ValueError("save needs a checkpoint")
        checkpoint.save(path)
        return checkpoint
    if mode == "load":
        return Checkpoint.load(path)
    raise ValueError(f"unknown mode {mode!r}")
