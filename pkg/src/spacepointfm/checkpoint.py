"""Binary checkpoint container.

Layout: magic "FMNP" (4 bytes), u32 little-endian format version (= 1), u64
metadata byte length, UTF-8 JSON metadata (config, named tensor manifest with
shapes and byte offsets into the data section, grid/bins documents, training
state, RNG seed), the raw little-endian float32 arrays in manifest order, and
a trailing CRC32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"FMNP"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(path, tensors: dict, metadata: dict) -> None:
    """Write named float32 arrays plus a JSON metadata document."""
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(
            arr.data if hasattr(arr, "data") and hasattr(arr, "shape") else arr)
        blob = data.astype("<f4", copy=False).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(data)),
                         "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = dict(metadata)
    meta["tensors"] = manifest
    meta_bytes = json.dumps(meta).encode("utf-8")
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(meta_bytes))
    payload = header + meta_bytes + b"".join(blobs)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict of float32 arrays, metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise CheckpointFormatError("file too short to be a checkpoint")
    payload, crc_bytes = raw[:-4], raw[-4:]
    if payload[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {payload[:4]!r}")
    version = struct.unpack("<I", payload[4:8])[0]
    if version != VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {VERSION}")
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointChecksumError("checksum mismatch (corrupt or truncated file)")
    meta_len = struct.unpack("<Q", payload[8:16])[0]
    if 16 + meta_len > len(payload):
        raise CheckpointFormatError("metadata length exceeds file size")
    metadata = json.loads(payload[16:16 + meta_len].decode("utf-8"))
    data = payload[16 + meta_len:]
    tensors = {}
    for entry in metadata.pop("tensors"):
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(data):
            raise CheckpointFormatError(f"tensor {entry['name']!r} exceeds data section")
        arr = np.frombuffer(data[start:start + nbytes], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, metadata


def check_shapes(tensors: dict, expected: dict) -> None:
    """Raise CheckpointShapeError naming the first tensor whose shape differs."""
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                f"expected {tuple(shape)}")
    for name in tensors:
        if name not in expected:
            raise CheckpointShapeError(f"unexpected tensor {name!r} in checkpoint")
