"""Versioned little-endian tensor container.

Layout::

    "XFUS"  u32 version  u8 kind  u32 count
    count x ( u16 name_len  name[utf-8]  u8 rank  u32 dims[rank]  f64 payload[prod(dims)] )
    u64 FNV-1a of every preceding byte

Training metadata travels as rank-0 tensors named ``meta.<key>``. The same
container stores model weights, lesion maps and exported samples; the kind
byte says which.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    HeaderError,
    KindError,
    TruncationError,
    ValidationError,
    VersionError,
)
from .kernels import fnv1a64

MAGIC = b"XFUS"
VERSION = 1
KINDS = {"segmentation": 1, "classification": 2, "lesion-map": 3, "sample": 4}
KIND_NAMES = {v: k for k, v in KINDS.items()}
META_PREFIX = "meta."
_HEADER = struct.Struct("<4sIBI")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown container kind {self.kind!r}")

    def entries(self) -> list[tuple[str, np.ndarray]]:
        reserved = [n for n in self.tensors if n.startswith(META_PREFIX)]
        if reserved:
            raise FormatError(f"tensor names may not use the reserved prefix {META_PREFIX!r}: {reserved}")
        out = [(name, np.asarray(arr, dtype=np.float64)) for name, arr in self.tensors.items()]
        out += [(META_PREFIX + k, np.asarray(float(v), dtype=np.float64)) for k, v in self.meta.items()]
        return out


def encode(ckpt: Checkpoint) -> bytes:
    entries = ckpt.entries()
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    parts = [_HEADER.pack(MAGIC, VERSION, KINDS[ckpt.kind], len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(np.frombuffer(body, dtype=np.uint8)))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncationError(f"file ends inside {what} at byte {self.pos} (need {n}, have {self.end - self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode(buf: bytes, expect_kind: str | None = None) -> Checkpoint:
    """Parse a container; every failure raises a :class:`CheckpointError` subclass.

    Header problems are reported first, then structure (truncation, bad
    names, trailing bytes), then the checksum.
    """
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise HeaderError("bad magic; not an xfuse container")
    if len(buf) < _HEADER.size + 8:
        raise TruncationError(f"file too short for a header ({len(buf)} bytes)")
    _, version, kind_code, count = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (this reader knows {VERSION})")
    if kind_code not in KIND_NAMES:
        raise HeaderError(f"unknown container kind code {kind_code}")
    kind = KIND_NAMES[kind_code]
    if expect_kind is not None and kind != expect_kind:
        raise KindError(f"expected a {expect_kind} container, found {kind}")

    r = _Reader(buf, len(buf) - 8)
    r.pos = _HEADER.size
    entries: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(n, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not valid UTF-8") from None
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        size = math.prod(dims)
        payload = r.take(8 * size, f"payload of {name!r}")
        entries.append((name, np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)))
    if r.pos != r.end:
        raise FormatError(f"{r.end - r.pos} unexpected bytes after the last tensor")
    (stored,) = struct.unpack_from("<Q", buf, r.end)
    actual = fnv1a64(np.frombuffer(buf, dtype=np.uint8, count=r.end))
    if stored != actual:
        raise ChecksumError(f"checksum mismatch: stored {stored:#018x}, computed {actual:#018x}")

    tensors, meta = {}, {}
    for name, arr in entries:
        if name.startswith(META_PREFIX) and arr.ndim == 0:
            meta[name[len(META_PREFIX) :]] = float(arr)
        else:
            tensors[name] = arr
    return Checkpoint(kind=kind, tensors=tensors, meta=meta)


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix="." + path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    atomic_write(path, encode(ckpt))


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expect_kind)


# --------------------------------------------------------------- helpers


def split_u64(value: int) -> tuple[float, float]:
    """A u64 as two exactly representable 32-bit halves (f64 holds 53 bits)."""
    return float(value >> 32), float(value & 0xFFFFFFFF)


def join_u64(hi: float, lo: float) -> int:
    return (int(hi) << 32) | int(lo)


def params_to_arrays(params: Mapping) -> dict[str, np.ndarray]:
    return {name: np.array(p.data if hasattr(p, "data") else p, dtype=np.float64) for name, p in params.items()}
