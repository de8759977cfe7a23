"""Binary tensor serialization and the named-tensor checkpoint container.

A tensor block is: rank as unsigned 64-bit little-endian, then one u64 per
extent, then the raw little-endian IEEE float buffer (row-major). The block
itself does not carry a dtype; the surrounding container does.

Checkpoint container layout (also used for datasets via a different magic):

    magic (4 bytes) | version u32 | meta_len u64 | meta JSON (utf-8)
    | tensor blocks in meta["names"] order | sha256 of everything above

The JSON metadata is dumped with sorted keys so identical content produces
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC_CHECKPOINT = b"LFNT"
CONTAINER_VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or truncated file."""


class DigestError(FormatError):
    """Payload digest does not match the recorded one."""


def config_digest(config: dict) -> str:
    """Stable hex digest of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_tensor_block(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise FormatError(f"tensor blocks store float32/float64, got {arr.dtype}")
    f.write(struct.pack("<Q", arr.ndim))
    for extent in arr.shape:
        f.write(struct.pack("<Q", extent))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor_block(f, dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    head = f.read(8)
    if len(head) != 8:
        raise FormatError("truncated tensor block header")
    rank = struct.unpack("<Q", head)[0]
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = []
    for _ in range(rank):
        raw = f.read(8)
        if len(raw) != 8:
            raise FormatError("truncated tensor block extents")
        shape.append(struct.unpack("<Q", raw)[0])
    count = int(np.prod(shape)) if shape else 1
    buf = f.read(count * dtype.itemsize)
    if len(buf) != count * dtype.itemsize:
        raise FormatError("truncated tensor block data")
    return np.frombuffer(buf, dtype=dtype.newbyteorder("<")).reshape(shape).astype(dtype)


def save_container(path, tensors: dict, meta: dict, magic: bytes = MAGIC_CHECKPOINT):
    """Write named tensors plus metadata; appends a sha256 integrity trailer."""
    names = list(tensors.keys())
    full_meta = dict(meta)
    full_meta["names"] = names
    full_meta["dtypes"] = {
        n: ("f8" if np.asarray(tensors[n]).dtype == np.float64 else "f4") for n in names
    }
    meta_blob = json.dumps(full_meta, sort_keys=True, separators=(",", ":")).encode()

    import io

    body = io.BytesIO()
    body.write(magic)
    body.write(struct.pack("<I", CONTAINER_VERSION))
    body.write(struct.pack("<Q", len(meta_blob)))
    body.write(meta_blob)
    for n in names:
        arr = np.asarray(tensors[n])
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        write_tensor_block(body, arr)
    payload = body.getvalue()
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)


def load_container(path, magic: bytes = MAGIC_CHECKPOINT):
    """Read a container; returns (tensors dict, meta dict). Verifies digest."""
    raw = Path(path).read_bytes()
    if len(raw) < len(magic) + 4 + 8 + 32:
        raise FormatError(f"{path}: file too short")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise DigestError(f"{path}: sha256 digest mismatch (corrupt or truncated)")
    if payload[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {payload[:len(magic)]!r}, expected {magic!r}")

    import io

    f = io.BytesIO(payload[len(magic) :])
    version = struct.unpack("<I", f.read(4))[0]
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    meta_len = struct.unpack("<Q", f.read(8))[0]
    meta = json.loads(f.read(meta_len).decode())
    tensors = {}
    for n in meta["names"]:
        tensors[n] = read_tensor_block(f, _DTYPES[meta["dtypes"][n]])
    return tensors, meta
