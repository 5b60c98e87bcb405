"""Flat binary container for named float64 arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"SNPARAMS"
    version    u32
    meta_len   u32       length of the UTF-8 JSON metadata that follows
    meta       bytes
    n_entries  u32
    entries    n_entries x (name_len u16, name, ndim u8, dims u32[ndim],
                            offset u64, count u64)
    payload    little-endian float64 values; ``offset`` counts bytes from the
               start of the payload

Arrays are written row-major, so a round trip is bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import ParseError, UnsupportedFormatError

MAGIC = b"SNPARAMS"
VERSION = 1


def dumps(arrays: list[tuple[str, np.ndarray]], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(meta_bytes)))
    out.write(meta_bytes)
    out.write(struct.pack("<I", len(arrays)))
    offset = 0
    for name, arr in arrays:
        encoded = name.encode()
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(struct.pack("<QQ", offset, arr.size))
        offset += 8 * arr.size
    for _, arr in arrays:
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def loads(data: bytes) -> tuple[list[tuple[str, np.ndarray]], dict]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError("truncated parameter file")
        chunk = view[pos:pos + n]
        pos += n
        return bytes(chunk)

    if take(8) != MAGIC:
        raise UnsupportedFormatError("not a parameter file (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise UnsupportedFormatError(f"parameter file version={version}")
    meta = json.loads(take(meta_len).decode())
    (n_entries,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        offset, count = struct.unpack("<QQ", take(16))
        if int(np.prod(dims)) != count:
            raise ParseError(f"entry {name!r}: shape {dims} does not hold {count} values")
        table.append((name, dims, offset, count))
    payload = view[pos:]
    arrays = []
    for name, dims, offset, count in table:
        end = offset + 8 * count
        if end > len(payload):
            raise ParseError(f"entry {name!r} runs past the payload")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64)
        arrays.append((name, arr.reshape(dims)))
    return arrays, meta


def save(path, arrays, meta=None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path):
    return loads(Path(path).read_bytes())
