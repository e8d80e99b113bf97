"""Binary weight files.

Layout (all integers little-endian)::

    magic      5 bytes  b"LODAW"
    version    u32      currently 1
    namespace  u16 length + utf-8 bytes ("frozen" or "trainable")
    count      u32      number of tensors
    directory  count entries of
                 name    u16 length + utf-8 bytes
                 ndim    u8
                 dims    ndim x u32
                 offset  u64  byte offset of the tensor inside the payload
    payload    concatenated little-endian float64 values, row-major

Entries are written in sorted name order, so equal tensor sets produce
identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import WeightFileError

MAGIC = b"LODAW"
VERSION = 1
NAMESPACES = ("frozen", "trainable")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_weights(tensors: Mapping[str, np.ndarray], namespace: str) -> bytes:
    if namespace not in NAMESPACES:
        raise WeightFileError(f"unknown namespace {namespace!r}")
    names = sorted(tensors)
    header = [MAGIC, struct.pack("<I", VERSION), _pack_str(namespace), struct.pack("<I", len(names))]
    payload = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        header.append(_pack_str(name))
        header.append(struct.pack("<B", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<Q", offset))
        raw = arr.tobytes()
        payload.append(raw)
        offset += len(raw)
    return b"".join(header) + b"".join(payload)


def decode_weights(buf: bytes, namespace: str | None = None, source: str = "<bytes>") -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"{source}: truncated header at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    def take_str() -> str:
        (n,) = struct.unpack("<H", take(2))
        return take(n).decode("utf-8")

    if take(len(MAGIC)) != MAGIC:
        raise WeightFileError(f"{source}: not a LODAW weight file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise WeightFileError(f"{source}: weight format version {version}, this build reads version {VERSION}")
    ns = take_str()
    if namespace is not None and ns != namespace:
        raise WeightFileError(f"{source}: namespace {ns!r}, expected {namespace!r}")
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        name = take_str()
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (offset,) = struct.unpack("<Q", take(8))
        entries.append((name, tuple(dims), offset))
    payload = buf[pos:]
    expected = 0
    out: dict[str, np.ndarray] = {}
    for name, dims, offset in entries:
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if offset != expected:
            raise WeightFileError(f"{source}: tensor {name!r} at offset {offset}, expected {expected}")
        if offset + nbytes > len(payload):
            raise WeightFileError(f"{source}: payload truncated inside tensor {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64).reshape(dims)
        expected += nbytes
    if expected != len(payload):
        raise WeightFileError(f"{source}: payload has {len(payload) - expected} trailing bytes")
    return out


def save_weights(tensors: Mapping[str, np.ndarray], path, namespace: str) -> None:
    Path(path).write_bytes(encode_weights(tensors, namespace))


def load_weights(path, namespace: str | None = None) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read {path}: {exc}") from exc
    return decode_weights(buf, namespace, source=str(path))
