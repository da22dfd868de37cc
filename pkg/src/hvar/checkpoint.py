"""HVCK checkpoint files: a config text, its SHA-256 digest, a step counter and named tensors.

Layout (little-endian)::

    b"HVCK" | version u32 | kind str | config str | digest 32 bytes | step u64 |
    count u32 | count x (name str | rank u32 | extents u64... | float64 payload)

Strings are a u32 byte length followed by UTF-8.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .formats import FormatError, Reader, pack_f64_array, pack_string, pack_u32, pack_u64

CHECKPOINT_MAGIC = b"HVCK"
CHECKPOINT_VERSION = 1


class CheckpointMismatch(RuntimeError):
    """The stored configuration digest differs from the one the caller expects."""


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    config_text: str
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0

    @property
    def digest(self) -> str:
        return config_digest(self.config_text)

    def to_bytes(self) -> bytes:
        parts = [CHECKPOINT_MAGIC, pack_u32(CHECKPOINT_VERSION), pack_string(self.kind),
                 pack_string(self.config_text), bytes.fromhex(self.digest), pack_u64(self.step),
                 pack_u32(len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            parts += [pack_string(name), pack_u32(arr.ndim)]
            parts += [pack_u64(n) for n in arr.shape]
            parts.append(pack_f64_array(arr))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        r = Reader(buf)
        r.magic(CHECKPOINT_MAGIC)
        version = r.u32("version")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported HVCK version {version}", 4)
        kind = r.string("kind")
        text = r.string("config")
        at = r.pos
        digest = r.take(32, "config digest").hex()
        if digest != config_digest(text):
            raise FormatError("config digest does not match stored config text", at)
        step = r.u64("step")
        count = r.u32("tensor count")
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for i in range(count):
            name = r.string(f"tensor {i} name")
            rank = r.u32(f"tensor {name} rank")
            if rank > 32:
                raise FormatError(f"implausible rank {rank} for {name}", r.pos - 4)
            shape = tuple(r.u64(f"tensor {name} extent") for _ in range(rank))
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name}", r.pos)
            tensors[name] = r.f64_array(shape, f"tensor {name} payload")
        r.expect_end()
        return cls(kind, text, tensors, step)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load_checkpoint(path, expected_digest: str | None = None, kind: str | None = None,
                    force: bool = False) -> Checkpoint:
    """Read a checkpoint; refuses a config digest or kind mismatch unless ``force``."""
    with open(path, "rb") as fh:
        ckpt = Checkpoint.from_bytes(fh.read())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointMismatch(f"{path}: checkpoint holds a {ckpt.kind!r} model, expected {kind!r}")
    if expected_digest is not None and ckpt.digest != expected_digest and not force:
        raise CheckpointMismatch(f"{path}: config digest {ckpt.digest[:12]} differs from expected "
                                 f"{expected_digest[:12]} (use force to override)")
    return ckpt
