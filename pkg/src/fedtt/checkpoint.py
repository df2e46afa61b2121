"""Binary container for named float32 tensors.

Layout, all integers little-endian:

    magic   4 bytes  b"FTT1"
    version u32
    count   u32
    entry * count:
        name_len u16, name utf-8
        order    u8
        dims     u32 * order
        values   f32 * prod(dims), row-major
    crc32   u32      over everything before it

An empty checkpoint is exactly 16 bytes.  The CRC is checked before any
entry is parsed; structural errors report the byte offset they hit.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "inspect_checkpoint"]

MAGIC = b"FTT1"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors to ``path`` in insertion order.  Values stored as float32."""
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if not 0 < len(raw) <= 0xFFFF:
            raise ValueError(f"tensor name length out of range: {name!r}")
        arr = np.asarray(arr)
        if arr.ndim > 0xFF:
            raise ValueError(f"{name!r}: too many dimensions ({arr.ndim})")
        payload += struct.pack("<H", len(raw))
        payload += raw
        payload += struct.pack("<B", arr.ndim)
        if arr.ndim:
            payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(payload))


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.at = 0

    def take(self, n: int, what: str) -> bytes:
        if self.at + n > len(self.body):
            raise CheckpointError(
                f"truncated at offset {self.at}: needed {n} bytes for {what}"
            )
        out = self.body[self.at : self.at + n]
        self.at += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as {name: float32 array}, preserving file order."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise CheckpointError(
            f"file is {len(blob)} bytes; smallest valid checkpoint is 16"
        )
    body, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    computed = zlib.crc32(body) & 0xFFFFFFFF
    if computed != stored:
        raise CheckpointError(
            f"CRC mismatch at offset {len(blob) - 4}: "
            f"stored {stored:#010x}, computed {computed:#010x}"
        )
    r = _Reader(body)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    count = r.u32("entry count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name_at = r.at
        name_len = r.u16(f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"entry {i}: bad utf-8 name at offset {name_at}") from e
        if name in out:
            raise CheckpointError(f"entry {i}: duplicate name {name!r}")
        order = r.u8(f"entry {i} order")
        dims = tuple(r.u32(f"entry {i} dim {d}") for d in range(order))
        size = 1
        for d in dims:
            size *= d
        raw = r.take(4 * size, f"entry {i} ({name!r}) values")
        out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.at != len(body):
        raise CheckpointError(
            f"{len(body) - r.at} trailing bytes at offset {r.at}"
        )
    return out


def inspect_checkpoint(path) -> dict:
    """Summary of a checkpoint: version, byte size, and per-entry shapes."""
    tensors = load_checkpoint(path)
    size = Path(path).stat().st_size
    entries = [
        {
            "name": name,
            "shape": tuple(arr.shape),
            "size": int(arr.size),
            "min": float(arr.min()) if arr.size else 0.0,
            "max": float(arr.max()) if arr.size else 0.0,
        }
        for name, arr in tensors.items()
    ]
    return {
        "version": VERSION,
        "bytes": size,
        "count": len(entries),
        "total_params": sum(e["size"] for e in entries),
        "entries": entries,
    }
