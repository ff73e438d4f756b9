"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PODA"  u32 version  u32 n_sections
    per section:  u32 name_len  name  u64 payload_len  payload

Tensor-map payloads are ``u32 count`` then, per tensor, ``u32 name_len
name u32 ndim u32 dims... f32 data``.  JSON payloads use sorted keys, so the
same state always serializes to the same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PODA"
VERSION = 1
TENSOR_SECTIONS = ("params", "ema", "velocity")


class CheckpointError(Exception):
    def __init__(self, section: str, message: str):
        super().__init__(f"checkpoint section '{section}': {message}")
        self.section = section


@dataclass
class Checkpoint:
    config: dict
    vocab_tsv: str
    params: dict
    ema: dict
    velocity: dict
    state: dict = field(default_factory=dict)

    @property
    def vocab_hash(self) -> str:
        return self.state.get("vocab_hash", "")


def _pack_tensors(tensors: dict) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, section: str):
        self.buf, self.pos, self.section = buf, 0, section

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(self.section, f"truncated (needed {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _unpack_tensors(buf: bytes, section: str) -> dict:
    r = _Reader(buf, section)
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(section, "trailing bytes")
    return out


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    sections = [
        ("config", _json(ckpt.config)),
        ("vocab", ckpt.vocab_tsv.encode("utf-8")),
        ("params", _pack_tensors(ckpt.params)),
        ("ema", _pack_tensors(ckpt.ema)),
        ("velocity", _pack_tensors(ckpt.velocity)),
        ("state", _json(ckpt.state)),
    ]
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, payload in sections:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf, "header")
    if r.take(4) != MAGIC:
        raise CheckpointError("header", "bad magic bytes (not a checkpoint)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError("header", f"format version {version}, expected {VERSION}")
    n = r.u32()
    found = {}
    for i in range(n):
        r.section = f"#{i} header"
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        r.section = name
        found[name] = r.take(r.u64())
    if r.pos != len(buf):
        raise CheckpointError("trailer", "trailing bytes after last section")
    for name in ("config", "vocab", "state", *TENSOR_SECTIONS):
        if name not in found:
            raise CheckpointError(name, "missing")
    try:
        config = json.loads(found["config"])
    except ValueError as e:
        raise CheckpointError("config", f"invalid JSON ({e})") from None
    try:
        state = json.loads(found["state"])
    except ValueError as e:
        raise CheckpointError("state", f"invalid JSON ({e})") from None
    tensors = {name: _unpack_tensors(found[name], name) for name in TENSOR_SECTIONS}
    return Checkpoint(config, found["vocab"].decode("utf-8"), tensors["params"],
                      tensors["ema"], tensors["velocity"], state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
