"""Flat binary tensor container.

Layout (all integers little-endian)::

    b"MQT0"
    u64 header length, header bytes (UTF-8 JSON, may be empty)
    u64 record count
    per record:
        u64 name length, name bytes (UTF-8)
        u64 rank, rank x u64 dims
        u8  dtype tag (0 = float32, 1 = float64)
        payload, row-major
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"MQT0"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """File is not a well-formed tensor container."""


def dumps(tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    head = b"" if header is None else json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<B", _TAGS[arr.dtype]))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    """Parse a container; raises FormatError on any structural problem."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if n < 0 or pos + n > len(view):
            raise FormatError("truncated tensor container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def u64() -> int:
        return struct.unpack("<Q", take(8))[0]

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic bytes, expected MQT0")
    head_len = u64()
    head_raw = bytes(take(head_len))
    header = None
    if head_len:
        try:
            header = json.loads(head_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable header: {exc}") from exc
    count = u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            name = bytes(take(u64())).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        rank = u64()
        if rank > 32:
            raise FormatError(f"implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        tag = take(1)[0]
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}")
        dtype = _DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise FormatError("trailing bytes after last record")
    return tensors, header


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    blob = dumps(tensors, header)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as fh:
        return loads(fh.read())
