"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"MGLP"  u32 version
    u32 n  config text (UTF-8, n bytes)
    u32 n  metadata JSON (UTF-8, n bytes)
    u32 count
    count x { u16 n  name (UTF-8)
              u8 ndim  ndim x u32 dims
              prod(dims) x f64 payload }

Tensors appear in declaration order: model parameters first, then optimizer
state.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MGLP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, config_text: str, meta: dict, tensors):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for blob in (config_text.encode("utf-8"), json.dumps(meta, sort_keys=True).encode("utf-8")):
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
        tensors = list(tensors)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path):
    """Returns ``(config_text, meta, tensors)`` with ``tensors`` an ordered dict."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MGLP checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    texts = []
    for _ in range(2):
        (n,) = take("<I")
        texts.append(data[pos : pos + n].decode("utf-8"))
        pos += n
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        if pos + 8 * size > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return texts[0], json.loads(texts[1]), tensors
