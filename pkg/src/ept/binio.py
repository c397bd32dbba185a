"""Low-level helpers for the little-endian binary file formats."""

import struct

import numpy as np

from .errors import FormatError


def read_exact(f, n, what):
    start = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"unexpected end of file while reading {what}: "
            f"wanted {n} bytes, got {len(data)}",
            offset=start,
        )
    return data


def expect_magic(f, magic, what):
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"not a {what} file: expected magic {magic!r}, got {got!r}", offset=0)


def read_u32(f, what="u32"):
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def write_u32(f, value):
    if not 0 <= int(value) <= 0xFFFFFFFF:
        raise ValueError(f"value {value} does not fit in an unsigned 32-bit field")
    f.write(struct.pack("<I", int(value)))


def read_string(f, what):
    n = read_u32(f, f"{what} length")
    return read_exact(f, n, what).decode("utf-8")


def write_string(f, s):
    data = s.encode("utf-8")
    write_u32(f, len(data))
    f.write(data)


def read_array(f, dtype, count, what):
    itemsize = np.dtype(dtype).itemsize
    raw = read_exact(f, itemsize * count, what)
    return np.frombuffer(raw, dtype=dtype).copy()


def write_array(f, values, dtype):
    f.write(np.ascontiguousarray(values, dtype=dtype).tobytes())
