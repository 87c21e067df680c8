"""Little-endian binary record helpers shared by the on-disk formats.

All floating point data is stored as little-endian float64, all integer
sequences as little-endian int64.  These helpers operate on open binary
file objects; each format module defines its own magic/version header.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class FormatError(ValueError):
    """Corrupt, truncated, or version-incompatible binary file."""


def write_u8(fh, v: int) -> None:
    fh.write(struct.pack("<B", v))


def write_u16(fh, v: int) -> None:
    fh.write(struct.pack("<H", v))


def write_u32(fh, v: int) -> None:
    fh.write(struct.pack("<I", v))


def write_u64(fh, v: int) -> None:
    fh.write(struct.pack("<Q", v))


def write_i64(fh, v: int) -> None:
    fh.write(struct.pack("<q", v))


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def read_u8(fh) -> int:
    return struct.unpack("<B", _read(fh, 1))[0]


def read_u16(fh) -> int:
    return struct.unpack("<H", _read(fh, 2))[0]


def read_u32(fh) -> int:
    return struct.unpack("<I", _read(fh, 4))[0]


def read_u64(fh) -> int:
    return struct.unpack("<Q", _read(fh, 8))[0]


def read_i64(fh) -> int:
    return struct.unpack("<q", _read(fh, 8))[0]


def write_string(fh, s: str) -> None:
    raw = s.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_string(fh) -> str:
    n = read_u32(fh)
    return _read(fh, n).decode("utf-8")


def write_json(fh, obj) -> None:
    # sort_keys keeps re-serialization byte-stable
    write_string(fh, json.dumps(obj, sort_keys=True))


def read_json(fh):
    return json.loads(read_string(fh))


def write_array_f8(fh, arr: np.ndarray) -> None:
    """Shape-prefixed float64 array, little-endian."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    write_u8(fh, arr.ndim)
    for d in arr.shape:
        write_u64(fh, d)
    fh.write(arr.tobytes())


def read_array_f8(fh) -> np.ndarray:
    ndim = read_u8(fh)
    shape = tuple(read_u64(fh) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _read(fh, 8 * count)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def write_array_i64(fh, values) -> None:
    arr = np.ascontiguousarray(values, dtype="<i8")
    write_u64(fh, arr.size)
    fh.write(arr.tobytes())


def read_array_i64(fh) -> np.ndarray:
    n = read_u64(fh)
    raw = _read(fh, 8 * n)
    return np.frombuffer(raw, dtype="<i8").astype(np.int64)


def check_magic(fh, magic: bytes, version: int, what: str) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"not a {what} file (bad magic {got!r})")
    got_version = read_u16(fh)
    if got_version != version:
        raise FormatError(
            f"{what} format version {got_version} not supported (expected {version})"
        )


def write_magic(fh, magic: bytes, version: int) -> None:
    fh.write(magic)
    write_u16(fh, version)
