"""Flat binary container of named float32 arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"SSADVARR"
    version    uint32    currently 1
    meta_len   uint32    length of the UTF-8 JSON metadata block
    meta       meta_len bytes
    count      uint32    number of arrays
    count x {
        name_len  uint16
        name      name_len bytes, UTF-8
        ndim      uint32
        dims      ndim x uint64
        data      prod(dims) x float32 ("<f4"), row-major
    }

Checkpoints store parameters, normalization buffers and optimizer state in
it; the metadata block carries the architecture descriptor and the jigsaw
permutation set. Datasets use the same container with ``images`` and
``labels`` arrays.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SSADVARR"
VERSION = 1


class ContainerError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())
    tmp.replace(path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic {buf[:8]!r} at offset 0")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    off = 16
    meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        if off + 4 * n > len(buf):
            raise ContainerError(f"{path}: truncated array {name!r} at offset {off}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(buf):
        raise ContainerError(f"{path}: {len(buf) - off} trailing bytes at offset {off}")
    return arrays, meta
