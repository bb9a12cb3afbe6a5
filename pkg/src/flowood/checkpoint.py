"""Binary checkpoint format.

Layout (little-endian)::

    b"NFCK" | version u32 | model_kind u8 | blob_len u64 | JSON blob
    then repeated tensor records:
    name_len u16 | name bytes | rank u8 | dims u64 * rank | f64 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NFCK"
FORMAT_VERSION = 1
KIND_CODES = {"glow": 0, "waveletflow": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    header: dict
    tensors: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(ckpt.header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IBQ", FORMAT_VERSION, KIND_CODES[ckpt.model_kind], len(blob)), blob]
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, kind, blob_len = struct.unpack_from("<IBQ", data, 4)
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in KIND_NAMES:
        raise CheckpointError(f"unknown model kind code {kind}")
    pos = 4 + struct.calcsize("<IBQ")
    header = json.loads(data[pos:pos + blob_len].decode("utf-8"))
    pos += blob_len
    tensors = {}
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(data):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error:
        raise CheckpointError("truncated tensor record") from None
    return Checkpoint(KIND_NAMES[kind], header, tensors)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
