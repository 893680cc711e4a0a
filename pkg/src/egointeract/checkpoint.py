"""Binary checkpoint format.

Layout (little-endian)::

    8s   magic  b"EGOCKPT\\0"
    u32  format version
    u64  manifest length in bytes
    ...  manifest, UTF-8 JSON with sorted keys
    ...  payload, float32 arrays back to back

The manifest records the stage, iteration, training config, optimizer step
count and, for every array, its name, shape and byte offset into the payload.
Arrays are written in sorted-name order, so equal states give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EGOCKPT\0"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: int
    iteration: int
    config: dict
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray] = field(default_factory=dict)  # "m/<name>", "v/<name>"
    adam_t: int = 0

    def to_bytes(self) -> bytes:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"moment/{k}": v for k, v in self.moments.items()})
        entries, chunks, offset = [], [], 0
        for name in sorted(arrays):
            raw = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(np.shape(arrays[name])), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        manifest = {
            "stage": self.stage,
            "iteration": self.iteration,
            "config": self.config,
            "adam_t": self.adam_t,
            "arrays": entries,
        }
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEADER.size:
            raise CheckpointError("checkpoint too short")
        magic, version, n = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            manifest = json.loads(data[_HEADER.size:_HEADER.size + n])
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from exc
        base = _HEADER.size + n
        params, moments = {}, {}
        for e in manifest["arrays"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            start = base + e["offset"]
            if start + 4 * count > len(data):
                raise CheckpointError("checkpoint payload truncated")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(e["shape"]).astype(np.float32)
            kind, name = e["name"].split("/", 1)
            (params if kind == "param" else moments)[name] = arr
        return cls(manifest["stage"], manifest["iteration"], manifest["config"], params, moments,
                   manifest["adam_t"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except FileNotFoundError as exc:
            raise CheckpointError(f"no checkpoint at {path}") from exc
        return cls.from_bytes(data)
