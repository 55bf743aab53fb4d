"""Binary checkpoint files.

Layout, all integers little-endian::

    b"MOEP" | u32 format version | u32 header length | header text (utf-8)
    body: repeated records of
        u32 name length | name bytes | u32 rank | u64 extent * rank | f64 payload
    u64 checksum of the body (8-byte BLAKE2b digest)

The header is ``kvtext``: the model configuration under ``model.*`` plus any
run state (step, schedule, optimizer counters, data stream position).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kvtext
from .errors import ConfigError
from .model import ModelConfig

MAGIC = b"MOEP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    header: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param."):]: v for k, v in self.arrays.items() if k.startswith("param.")}

    def arrays_with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def _checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def encode(ckpt: Checkpoint) -> bytes:
    header = kvtext.dumps({"model": ckpt.model_config.to_dict(), **ckpt.header}).encode("utf-8")
    body = bytearray()
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    body = bytes(body)
    return (MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + body
            + struct.pack("<Q", _checksum(body)))


def decode(blob: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    try:
        return _decode(blob, expected_config)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or malformed checkpoint: {exc}") from None


def _decode(blob: bytes, expected_config: ModelConfig | None) -> Checkpoint:
    if len(blob) < 20:
        raise CheckpointError("file too short to be a checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointError("missing MOEP magic bytes")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    if pos + hlen + 8 > len(blob):
        raise CheckpointError("truncated checkpoint")
    header = kvtext.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    body = blob[pos:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if stored != _checksum(body):
        raise CheckpointError("checksum mismatch")
    try:
        model_config = ModelConfig(**header.pop("model"))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bad model config in header: {exc}") from None
    if expected_config is not None and model_config != expected_config:
        raise ConfigError("checkpoint model config differs from the expected one")

    arrays: dict[str, np.ndarray] = {}
    off = 0
    while off < len(body):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", body, off)
        off += 8 * rank
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    return Checkpoint(model_config, arrays, header)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)
    return path


def load(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), expected_config)
