"""Portable little-endian tensor dump.

Single tensor record::

    b"SMTN" | version:u8 | dtype:u8 | rank:u16 | extents:u64*rank | payload

Archive (named records)::

    b"SMTA" | version:u8 | count:u32 | (name_len:u16 | utf-8 name | record) * count

The payload is the row-major array in little-endian byte order.
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"SMTN"
ARCHIVE_MAGIC = b"SMTA"
VERSION = 1

_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i8"),
    5: np.dtype("?"),
}
_BY_KIND = {("f", 4): 1, ("f", 8): 2, ("u", 1): 3, ("i", 8): 4, ("b", 1): 5}


class DumpFormatError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _BY_KIND:
        raise DumpFormatError(f"unsupported dtype {arr.dtype}")
    return _BY_KIND[key]


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    code = _code_for(arr)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BBH", VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DumpFormatError(f"truncated dump: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise DumpFormatError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<BBH", _read_exact(fh, 4))
    if version != VERSION:
        raise DumpFormatError(f"unsupported dump version {version}")
    if code not in _CODES:
        raise DumpFormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    dtype = _CODES[code]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_archive(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr)


def load_archive(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != ARCHIVE_MAGIC:
            raise DumpFormatError(f"bad archive magic {magic!r}")
        version, count = struct.unpack("<BI", _read_exact(fh, 5))
        if version != VERSION:
            raise DumpFormatError(f"unsupported archive version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_tensor(fh)
    return out
