"""Versioned binary checkpoints.

Layout (little-endian)::

    b"RBCL" | u32 version
    u32 n | config JSON
    u32 n | tensor table: u32 count, then per tensor
            u16 name_len, name, u8 ndim, u32 dims..., f32 payload
    u32 n | quantizer state JSON
    u32 n | metadata JSON
    u32 crc32 of the tensor table bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .net import Model, ModelConfig, build
from .quant import FakeQuantizer

MAGIC = b"RBCL"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _section(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def quantizer_state(model: Model) -> dict:
    return {
        "activations": model.quant_state(),
        "weights": {c.name: c.wq.state() for c in model.conv_layers()},
    }


def load_quantizer_state(model: Model, state: dict) -> None:
    if set(state) != {"activations", "weights"}:
        raise CheckpointError("malformed quantizer state")
    model.load_quant_state(state["activations"])
    convs = {c.name: c for c in model.conv_layers()}
    if set(convs) != set(state["weights"]):
        raise CheckpointError("weight quantizer state does not match the model layers")
    for name, st in state["weights"].items():
        convs[name].wq = FakeQuantizer.from_state(st)


def encode_tensors(state: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    out, off = {}, 0
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        if off + 4 * size > len(buf):
            raise struct.error("tensor payload truncated")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise CheckpointError("tensor table has trailing bytes")
    return out


def checkpoint_bytes(model: Model, metadata: dict | None = None) -> bytes:
    tensors = encode_tensors(model.state_dict())
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        _section(model.config.to_json().encode()),
        _section(tensors),
        _section(_json_bytes(quantizer_state(model))),
        _section(_json_bytes(metadata or {})),
        struct.pack("<I", zlib.crc32(tensors)),
    ])


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, metadata))
    return path


def parse_checkpoint(buf: bytes) -> tuple[Model, dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(buf) < 8:
        raise ChecksumError("checkpoint truncated")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    off, sections = 8, []
    try:
        for _ in range(4):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + n > len(buf):
                raise struct.error("section truncated")
            sections.append(buf[off : off + n])
            off += n
        (crc,) = struct.unpack_from("<I", buf, off)
    except struct.error as exc:
        raise ChecksumError(f"checkpoint truncated: {exc}") from None
    if off + 4 != len(buf):
        raise ChecksumError("checkpoint has trailing bytes")
    config_raw, tensors_raw, quant_raw, meta_raw = sections
    if zlib.crc32(tensors_raw) != crc:
        raise ChecksumError("tensor payload checksum mismatch")
    try:
        config = ModelConfig.from_json(config_raw.decode())
        state = decode_tensors(tensors_raw)
        quant = json.loads(quant_raw)
        meta = json.loads(meta_raw)
    except (ValueError, KeyError, struct.error) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    model = build(config)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    load_quantizer_state(model, quant)
    model.eval()
    return model, meta


def load_checkpoint(path) -> tuple[Model, dict]:
    """Model (in eval mode) and its metadata."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return parse_checkpoint(buf)


def is_checkpoint(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == MAGIC
    except OSError:
        return False
