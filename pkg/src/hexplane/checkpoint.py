"""Versioned binary container for named float64 parameter tensors.

Layout (little-endian):

    magic   b"HXCKPT\\0\\0"
    u16     version (= 1)
    u32     tensor count
    per tensor, sorted by name:
        u16       name length, then UTF-8 name bytes
        u8        ndim, then ndim * u64 dims
        float64   payload, C order

Sorted names make the byte stream a pure function of the mapping.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"HXCKPT\x00\x00"
_VERSION = 1


def save_checkpoint(path, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_MAGIC):
        raise ValueError("not a checkpoint file (bad magic)")
    offset = len(_MAGIC)
    version, count = struct.unpack_from("<HI", raw, offset)
    offset += struct.calcsize("<HI")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        params[name] = arr.copy()
    if offset != len(raw):
        raise ValueError("trailing bytes after last tensor")
    return params
