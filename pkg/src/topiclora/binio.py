"""Small helpers for the little-endian binary file formats used by this package.

Every on-disk artifact starts with an 8-byte ASCII magic and a u32 version.
All integers are little-endian; all tensors are float32 little-endian,
row-major.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

FORMAT_VERSION = 1


def read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated file while reading {what}")
    return data


def write_magic(fh: BinaryIO, magic: bytes, version: int = FORMAT_VERSION) -> None:
    assert len(magic) == 8
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def check_magic(fh: BinaryIO, magic: bytes) -> int:
    got = read_exact(fh, 8, "magic")
    if got != magic:
        raise ValueError(f"bad magic: expected {magic!r}, got {got!r}")
    (version,) = struct.unpack("<I", read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    return version


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def write_f32(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<f", value))


def write_f64(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<d", value))


def read_u32(fh: BinaryIO, what: str = "u32") -> int:
    return struct.unpack("<I", read_exact(fh, 4, what))[0]


def read_u64(fh: BinaryIO, what: str = "u64") -> int:
    return struct.unpack("<Q", read_exact(fh, 8, what))[0]


def read_f32(fh: BinaryIO, what: str = "f32") -> float:
    return struct.unpack("<f", read_exact(fh, 4, what))[0]


def read_f64(fh: BinaryIO, what: str = "f64") -> float:
    return struct.unpack("<d", read_exact(fh, 8, what))[0]


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO, what: str = "string") -> str:
    n = read_u32(fh, f"{what} length")
    return read_exact(fh, n, what).decode("utf-8")


def write_f32_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(arr.tobytes())


def read_f32_array(fh: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = read_exact(fh, 4 * count, what)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def write_u64_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<u8").tobytes())


def read_u64_array(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = read_exact(fh, 8 * count, what)
    return np.frombuffer(raw, dtype="<u8").copy()
