"""Versioned binary checkpoints.

Layout, all integers little-endian::

    magic  b"ENTALIGN"          8 bytes
    version                     u32
    meta length, meta JSON      u32, UTF-8 bytes
    block count                 u32
    per block:
        name length, name       u32, UTF-8 bytes
        ndim, dims              u32, ndim x u64
        values                  prod(dims) x float64 ('<f8'), C order

Blocks named ``param.*`` are model parameters and ``adam.*`` optimizer
state, each group in sorted name order.  The JSON meta carries the config
fingerprint, the epoch counter, the run config and the knowledge base text,
so a checkpoint can be evaluated on its own.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ENTALIGN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    epoch: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    kb_text: str = ""

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        meta = json.dumps({"fingerprint": self.fingerprint, "epoch": self.epoch,
                           "config": self.config, "kb": self.kb_text},
                          sort_keys=True, separators=(",", ":")).encode()
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        blocks = [(f"param.{k}", self.params[k]) for k in sorted(self.params)]
        blocks += [(k, self.optimizer[k]) for k in sorted(self.optimizer)]
        buf.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            arr = np.asarray(arr, dtype="<f8", order="C")
            raw = name.encode()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("truncated checkpoint")
            out = view[pos:pos + n]
            pos += n
            return out

        def u32() -> int:
            return struct.unpack("<I", take(4))[0]

        if bytes(take(len(MAGIC))) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version = u32()
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(take(u32())).decode())
        params, opt = {}, {}
        for _ in range(u32()):
            name = bytes(take(u32())).decode()
            ndim = u32()
            shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
            if name.startswith("param."):
                params[name[len("param."):]] = arr
            else:
                opt[name] = arr
        if pos != len(view):
            raise CheckpointError("trailing bytes after last block")
        return cls(meta["fingerprint"], int(meta["epoch"]), params, opt, meta["config"], meta["kb"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, expected_fingerprint: str | None = None,
             allow_mismatch: bool = False) -> "Checkpoint":
        ckpt = cls.from_bytes(Path(path).read_bytes())
        if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint \
                and not allow_mismatch:
            raise FingerprintMismatch(
                f"checkpoint was trained under config {ckpt.fingerprint[:16]}, "
                f"not {expected_fingerprint[:16]}")
        return ckpt
