"""Binary container helpers shared by the HVTN, HVTK and HVCK formats.

All integers are little-endian.  Readers raise :class:`FormatError` carrying
the byte offset at which parsing failed.
"""
from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class Reader:
    """Cursor over a bytes buffer that reports truncation with offsets."""

    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(f"{what} length")
        start = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", start) from None

    def f64_array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def varint(self, what: str) -> int:
        shift = value = 0
        start = self.pos
        while True:
            if self.pos >= len(self.buf):
                raise FormatError(f"truncated varint in {what}", start)
            byte = self.buf[self.pos]
            self.pos += 1
            value |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return value
            shift += 7
            if shift > 63:
                raise FormatError(f"varint too long in {what}", start)

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def pack_u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def pack_f64(v: float) -> bytes:
    return struct.pack("<d", v)


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return pack_u32(len(raw)) + raw


def pack_varint(v: int) -> bytes:
    if v < 0:
        raise ValueError("varint encodes non-negative integers only")
    out = bytearray()
    while True:
        byte = v & 0x7F
        v >>= 7
        if v:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def pack_f64_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()
