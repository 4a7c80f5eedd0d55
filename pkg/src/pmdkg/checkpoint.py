"""PMDC binary checkpoint format.

Layout (little-endian)::

    b"PMDC" | u32 version | u64 len | JSON config (UTF-8)
    repeated until EOF:
        u64 name_len | name (UTF-8) | u64 rank | u64 dim * rank | float32 payload (row-major)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import BiEncoder, EncoderConfig

MAGIC = b"PMDC"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: BiEncoder
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: BiEncoder, meta: dict | None = None) -> None:
    blob = json.dumps(
        {"encoder": model.config.to_dict(), "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U64.pack(len(blob)), blob]
    for name, value in model.named_tensors().items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(_U64.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(n) for n in arr.shape)
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def _take(buf: memoryview, pos: int, n: int) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise CheckpointError("truncated PMDC checkpoint")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path) -> Checkpoint:
    buf = memoryview(Path(path).read_bytes())
    head, pos = _take(buf, 0, 4)
    if bytes(head) != MAGIC:
        raise CheckpointError("not a PMDC checkpoint")
    raw, pos = _take(buf, pos, 4)
    (version,) = _U32.unpack(raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported PMDC version {version} (expected {VERSION})")
    raw, pos = _take(buf, pos, 8)
    (blob_len,) = _U64.unpack(raw)
    raw, pos = _take(buf, pos, blob_len)
    header = json.loads(bytes(raw).decode("utf-8"))
    config = EncoderConfig(**header["encoder"])
    named: dict[str, np.ndarray] = {}
    while pos < len(buf):
        raw, pos = _take(buf, pos, 8)
        (name_len,) = _U64.unpack(raw)
        raw, pos = _take(buf, pos, name_len)
        name = bytes(raw).decode("utf-8")
        raw, pos = _take(buf, pos, 8)
        (rank,) = _U64.unpack(raw)
        dims = []
        for _ in range(rank):
            raw, pos = _take(buf, pos, 8)
            dims.append(_U64.unpack(raw)[0])
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw, pos = _take(buf, pos, 4 * count)
        named[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    try:
        model = BiEncoder.from_named(config, named)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint parameters inconsistent with config: {exc}") from exc
    return Checkpoint(model, header.get("meta", {}))


def model_digest(model: BiEncoder) -> str:
    h = hashlib.sha256()
    for name, value in model.named_tensors().items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()
