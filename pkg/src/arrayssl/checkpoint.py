"""``.nnck`` named-tensor checkpoints.

Layout (little-endian)::

    b"NNCK" | u8 version=1 | u32 n_tensors
    n_tensors x ( u16 name_len | name utf-8 | u8 ndim | ndim x u32 dim | f32 payload )
    u32 meta_len | meta utf-8  (``key=value`` lines)
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"NNCK"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    metadata: dict[str, str] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, str]:
        """Metadata entries under ``prefix.``, with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.metadata.items() if k.startswith(head)}

    def manifest(self) -> list[str]:
        rows = self.section("manifest")
        return [rows[k] for k in sorted(rows, key=int)]


def encode_metadata(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise FormatError(f"metadata entry {k!r} cannot be encoded as a key=value line")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def decode_metadata(raw: bytes) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"metadata line {lineno} is not key=value: {line!r}")
        meta[key] = value
    return meta


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255 or len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = encode_metadata(ckpt.metadata)
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                              f"file has {len(self.raw)}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (count,) = r.unpack("<I", "tensor count")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n, f"payload of {name} with shape {dims}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = decode_metadata(r.take(meta_len, "metadata"))
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after metadata; shape table inconsistent with payload")
    return Checkpoint(tensors, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
