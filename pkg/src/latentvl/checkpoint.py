"""Checkpoint container: JSON header + raw f32 tensor records + checksum.

Layout (all integers little-endian):

    magic  b"LVLC"  | version u32
    header_len u64  | header JSON (utf-8)
    tensor_count u32
    per tensor: name_len u16 | name | ndim u8 | dims u32... | nbytes u64 | data
    sha256 of everything above (32 bytes)

Tensor data is always little-endian float32.  save -> load -> save is
byte-identical.  The same container stores retrieval latent caches.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CheckpointError
from .tensor import ParamStore

MAGIC = b"LVLC"
VERSION = 1


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        raw = arr.tobytes()
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray] | ParamStore,
                    header: dict) -> None:
    if isinstance(tensors, ParamStore):
        tensors = {name: t.data for name, t in tensors.items()}
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body = (MAGIC + struct.pack("<I", VERSION)
            + struct.pack("<Q", len(hdr)) + hdr
            + _pack_tensors(tensors))
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 + 4 + 8 + 32:
        raise CheckpointError("file too short to be a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch (corrupted or truncated file)")
    if body[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hdr_len,) = struct.unpack_from("<Q", body, 8)
    off = 16
    header = json.loads(body[off:off + hdr_len].decode("utf-8"))
    off += hdr_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, off)
        off += 8
        arr = np.frombuffer(body[off:off + nbytes], dtype="<f4").reshape(shape)
        off += nbytes
        tensors[name] = arr.copy()
    if off != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    return header, tensors


def load_into_store(store: ParamStore, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into a ParamStore, validating names and shapes."""
    names = set(store.names())
    missing = names - set(tensors)
    if missing:
        raise CheckpointError(f"missing tensors: {sorted(missing)[:5]}")
    extra = set(tensors) - names
    if extra:
        raise CheckpointError(f"unexpected tensors: {sorted(extra)[:5]}")
    for name, arr in tensors.items():
        t = store[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape} "
                f"vs model {t.data.shape}")
        t.data = arr.astype(t.data.dtype)
