"""Checkpoint container ("AVCK1"): named tensors with per-tensor dtype tags
plus a JSON metadata block.

Layout: magic, u32 header length, JSON header, then raw little-endian
tensor bytes in sorted-name order.  Tensors keep their stored dtype on
load, so a 64-bit training run reloads bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import ValidationError

CHECKPOINT_MAGIC = b"AVCK1\n"

_DTYPE_TAGS = {
    np.dtype(np.float32): "<f4",
    np.dtype(np.float64): "<f8",
    np.dtype(np.int32): "<i4",
    np.dtype(np.int64): "<i8",
    np.dtype(np.uint8): "|u1",
}


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    items = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dt = np.dtype(arr.dtype)
        if dt not in _DTYPE_TAGS:
            raise ValidationError(f"tensor {name!r} has unsupported dtype {dt}")
        items.append((name, arr, _DTYPE_TAGS[dt]))
    header = {
        "version": 1,
        "metadata": metadata or {},
        "tensors": {name: {"shape": list(arr.shape), "dtype": tag}
                    for name, arr, tag in items},
    }
    blob = io.BytesIO()
    blob.write(CHECKPOINT_MAGIC)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob.write(struct.pack("<I", len(header_bytes)))
    blob.write(header_bytes)
    for _, arr, tag in items:
        blob.write(arr.astype(tag, copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(blob.getvalue())


def load_checkpoint(path):
    """Returns (tensors, metadata); arrays come back writable with their
    stored dtypes."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not an AVCK1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    if header.get("version") != 1:
        raise ValidationError(f"unsupported checkpoint version {header.get('version')}")
    tensors = {}
    for name in sorted(header["tensors"]):
        meta = header["tensors"][name]
        shape = tuple(meta["shape"])
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(shape)) if shape else 1
        end = off + count * dt.itemsize
        if end > len(raw):
            raise ValidationError(f"checkpoint truncated while reading {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt, count=count, offset=off) \
                          .reshape(shape).copy()
        off = end
    return tensors, header["metadata"]
