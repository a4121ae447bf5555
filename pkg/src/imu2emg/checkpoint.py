"""Binary checkpoint format.

Layout (little-endian)::

    magic        8 bytes  b"I2EMGCKP"
    version      u32
    config_len   u32, then canonical JSON of the model config (UTF-8)
    n_blobs      u32
    per blob:    name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
                 float32 data
    crc32        u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .dataset import write_bytes_atomic
from .model import ModelConfig, ModelParams, param_shapes
from .tensor import Tensor

MAGIC = b"I2EMGCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(params: ModelParams, config: ModelConfig) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = canonical_json(config.to_dict())
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> tuple[ModelParams, ModelConfig]:
    if len(buf) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint truncated")
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch (file corrupted or truncated)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (clen,) = take("<I")
    config = ModelConfig.from_dict(json.loads(body[pos : pos + clen].decode("utf-8")))
    pos += clen
    (n,) = take("<I")
    tensors = {}
    for _ in range(n):
        (nlen,) = take("<H")
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        if pos + 4 * count > len(body):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
        tensors[name] = Tensor(arr, requires_grad=True)
    if pos != len(body):
        raise CheckpointError("trailing bytes after parameter blobs")
    expected = param_shapes(config)
    got = [(k, v.shape) for k, v in tensors.items()]
    if got != [(k, tuple(s)) for k, s in expected]:
        raise CheckpointError("parameter blobs do not match the stored config")
    return ModelParams(tensors), config


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """Write atomically (temp file + rename)."""
    write_bytes_atomic(path, encode_checkpoint(params, config))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
