"""Versioned checkpoint container: named tensors plus a JSON metadata
block, shared by the VAE, edge estimator, and diffusion model.

Layout (little-endian): magic "EDCP", format version u8, meta length
u32, meta JSON (utf-8), tensor count u32, then per tensor: name (u16
length + utf-8), dtype string (u8 length + ascii), ndim u8, dims u32
each, raw C-order bytes. A crc32 over everything after the magic closes
the file.
"""

import hashlib
import json
import struct
import zlib
from dataclasses import asdict
from datetime import datetime, timezone

import numpy as np

from .errors import CorruptStreamError

MAGIC = b"EDCP"
FORMAT_VERSION = 1


def train_meta(config, history):
    """Checkpoint metadata for a training run: the full config, its
    hash, and the loss history."""
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return {
        "train_config": asdict(config),
        "train_config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "history": history,
    }


def save_checkpoint(path, meta, tensors):
    """Write metadata and named float tensors. Adds ``format_version``
    and a ``created_at`` timestamp to the stored metadata."""
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["created_at"] = datetime.now(timezone.utc).isoformat()
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")

    body = bytearray()
    body += struct.pack("<BI", FORMAT_VERSION, len(meta_blob))
    body += meta_blob
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.ndim:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        name_b = name.encode("utf-8")
        dt = arr.dtype.str.encode("ascii")
        body += struct.pack("<H", len(name_b)) + name_b
        body += struct.pack("<B", len(dt)) + dt
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        body += arr.tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC + bytes(body) + struct.pack("<I", crc))


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns (meta, tensors). Raises CorruptStreamError on magic,
    version, or CRC failure.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CorruptStreamError(f"{path}: not a checkpoint file")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if crc != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CorruptStreamError(f"{path}: checkpoint CRC mismatch")
    pos = 0
    version, meta_len = struct.unpack_from("<BI", body, pos)
    pos += 5
    if version != FORMAT_VERSION:
        raise CorruptStreamError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(body[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (dt_len,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dtype = np.dtype(body[pos : pos + dt_len].decode("ascii"))
        pos += dt_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos) if ndim else ()
        pos += 4 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(body[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
        tensors[name] = arr
    return meta, tensors
