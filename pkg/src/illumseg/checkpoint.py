"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"ILSGCKPT"
    version    u32      1
    meta_len   u32      length of the UTF-8 JSON block that follows
    meta       bytes    {"config": <DUNetConfig dict>, "max_val_miou": float|null}
    step       u64      optimizer steps taken
    seed       i64      build/training seed
    n_tensors  u32
    repeated n_tensors times:
        rank   u32
        dims   rank x u32
        data   prod(dims) x float32, row-major

Tensors appear in :meth:`Model.parameters` order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .net import DUNetConfig, Model, build

MAGIC = b"ILSGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: DUNetConfig
    tensors: List[np.ndarray]
    step: int = 0
    seed: int = 0
    max_val_miou: Optional[float] = None

    @classmethod
    def from_model(cls, model: Model, step: int = 0, max_val_miou: Optional[float] = None) -> "Checkpoint":
        return cls(model.config, model.state(), step, model.seed, max_val_miou)

    def to_model(self) -> Model:
        model = build(self.config, self.seed)
        model.load_state(self.tensors)
        return model

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        meta = json.dumps({"config": self.config.to_dict(), "max_val_miou": self.max_val_miou},
                          sort_keys=True).encode()
        out.write(MAGIC)
        out.write(struct.pack("<II", VERSION, len(meta)))
        out.write(meta)
        out.write(struct.pack("<QqI", self.step, self.seed, len(self.tensors)))
        for t in self.tensors:
            out.write(struct.pack("<I", t.ndim))
            out.write(struct.pack(f"<{t.ndim}I", *t.shape))
            out.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        view = memoryview(buf)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(8)) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        version, meta_len = struct.unpack("<II", take(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(take(meta_len)).decode())
        step, seed, count = struct.unpack("<QqI", take(20))
        tensors = []
        for _ in range(count):
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            tensors.append(np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims))
        return cls(DUNetConfig.from_dict(meta["config"]), tensors, step, seed, meta.get("max_val_miou"))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
