"""PNG images and raw ``HVTN`` tensor files.

HVTN layout: ``b"HVTN"``, version (u32), rank (u32), extents (u64 each),
row-major float64 payload.
"""
from __future__ import annotations

import io
import os
import struct
import zlib

import numpy as np
from PIL import Image as PILImage

from .formats import FormatError, Reader, pack_f64_array, pack_u32, pack_u64
from .resample import Image

RAW_MAGIC = b"HVTN"
RAW_VERSION = 1
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def encode_raw_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    parts = [RAW_MAGIC, pack_u32(RAW_VERSION), pack_u32(arr.ndim)]
    parts += [pack_u64(n) for n in arr.shape]
    parts.append(pack_f64_array(arr))
    return b"".join(parts)


def decode_raw_tensor(buf: bytes) -> np.ndarray:
    r = Reader(buf)
    r.magic(RAW_MAGIC)
    version = r.u32("version")
    if version != RAW_VERSION:
        raise FormatError(f"unsupported HVTN version {version}", 4)
    rank = r.u32("rank")
    if rank > 32:
        raise FormatError(f"implausible rank {rank}", 8)
    shape = tuple(r.u64(f"extent {i}") for i in range(rank))
    arr = r.f64_array(shape, "payload")
    r.expect_end()
    return arr


def write_raw_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_raw_tensor(arr))


def read_raw_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_raw_tensor(fh.read())


def validate_png(buf: bytes) -> None:
    """Walk the chunk structure, checking lengths and CRCs before decoding."""
    if buf[:8] != PNG_SIGNATURE:
        raise FormatError("missing PNG signature", 0)
    pos = 8
    first = True
    while True:
        if pos + 8 > len(buf):
            raise FormatError("truncated chunk header", pos)
        length, ctype = struct.unpack(">I4s", buf[pos:pos + 8])
        if first and ctype != b"IHDR":
            raise FormatError(f"first chunk is {ctype!r}, expected IHDR", pos)
        first = False
        end = pos + 12 + length
        if end > len(buf):
            raise FormatError(f"truncated {ctype.decode('latin-1')} chunk", pos)
        crc = struct.unpack(">I", buf[end - 4:end])[0]
        if zlib.crc32(buf[pos + 4:end - 4]) != crc:
            raise FormatError(f"CRC mismatch in {ctype.decode('latin-1')} chunk", pos)
        if ctype == b"IEND":
            return
        pos = end


def read_png(path) -> Image:
    with open(path, "rb") as fh:
        buf = fh.read()
    validate_png(buf)
    try:
        with PILImage.open(io.BytesIO(buf)) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"undecodable PNG data: {exc}", 8) from None
    return Image(rgb.transpose(2, 0, 1) / 255.0)


def to_uint8(img: Image) -> np.ndarray:
    return np.round(img.pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_png(path, img: Image) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)
