"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"GTEF" | u32 version | u64 len | metadata JSON | u64 len | manifest JSON | payload

The manifest lists ``{"name", "shape", "offset"}`` per tensor, offsets in bytes
from the start of the payload, which is the concatenation of raw ``<f8``
arrays in manifest order.  JSON is written with sorted keys and no extra
whitespace so that load followed by save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"GTEF"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


@dataclass
class Checkpoint:
    """Model, optimizer and sampler state plus the configs that produced them."""

    encoder_config: dict
    params: dict  # name -> np.ndarray
    vocab: list
    step: int = 0
    stage: str = "init"
    train_config: Optional[dict] = None
    optimizer: Optional[dict] = None  # {"step": int, "m": {name: arr}, "v": {name: arr}}
    sampler: Optional[dict] = None
    loss_log: list = field(default_factory=list)  # [step, loss, lr] rows
    extra: dict = field(default_factory=dict)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("param/" + k, v) for k, v in self.params.items()]
        if self.optimizer is not None:
            out += [("adam_m/" + k, v) for k, v in self.optimizer["m"].items()]
            out += [("adam_v/" + k, v) for k, v in self.optimizer["v"].items()]
        return out

    def metadata(self) -> dict:
        return {
            "encoder_config": self.encoder_config,
            "vocab": self.vocab,
            "step": self.step,
            "stage": self.stage,
            "train_config": self.train_config,
            "optimizer_step": None if self.optimizer is None else self.optimizer["step"],
            "sampler": self.sampler,
            "loss_log": self.loss_log,
            "extra": self.extra,
        }

    def to_bytes(self) -> bytes:
        meta = canonical_json(self.metadata())
        manifest, chunks, offset = [], [], 0
        for name, arr in self.tensors():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            raw = arr.tobytes()
            chunks.append(raw)
            offset += len(raw)
        man = canonical_json(manifest)
        head = MAGIC + struct.pack("<I", FORMAT_VERSION)
        return b"".join([head, struct.pack("<Q", len(meta)), meta,
                         struct.pack("<Q", len(man)), man] + chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            return cls._parse(blob)
        except (struct.error, ValueError, KeyError, TypeError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"corrupt checkpoint: {exc}") from None

    @classmethod
    def _parse(cls, blob: bytes) -> "Checkpoint":
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 8
        (n,) = struct.unpack_from("<Q", blob, pos)
        meta = json.loads(blob[pos + 8:pos + 8 + n])
        pos += 8 + n
        (n,) = struct.unpack_from("<Q", blob, pos)
        manifest = json.loads(blob[pos + 8:pos + 8 + n])
        pos += 8 + n
        payload = memoryview(blob)[pos:]
        tensors = {}
        end = 0
        for entry in manifest:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
            tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
            end = max(end, entry["offset"] + 8 * count)
        if end != len(payload):
            raise CheckpointError(f"payload holds {len(payload)} bytes, manifest describes {end}")
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        optimizer = None
        if meta["optimizer_step"] is not None:
            optimizer = {
                "step": meta["optimizer_step"],
                "m": {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
                "v": {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")},
            }
        return cls(meta["encoder_config"], params, meta["vocab"], meta["step"], meta["stage"],
                   meta["train_config"], optimizer, meta["sampler"], meta["loss_log"], meta["extra"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"{path}: no such checkpoint")
        return cls.from_bytes(path.read_bytes())
