"""Bit-exact weight archive.

Layout (little-endian)::

    b"DEAW"  u32 version=1  u32 count
    count x { u16 name_len  name[utf-8]  u8 dtype(0=f32)  u8 ndim  u32 dims[ndim]  payload }

Tensors are written sorted by name; readers reject anything else.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from deanet._io import atomic_write_bytes
from deanet.network import BLOCK_STAGES, NetworkConfig, NetworkParams
from deanet.tensor import Tensor

MAGIC = b"DEAW"
VERSION = 1
DTYPE_F32 = 0
MAX_NDIM = 8
MAX_ELEMENTS = 2**31 - 1


class ArchiveError(Exception):
    """Base class for malformed or unreadable archives."""


class BadMagicError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class TruncatedError(ArchiveError):
    pass


class DuplicateNameError(ArchiveError):
    pass


class DimOverflowError(ArchiveError):
    """ndim above MAX_NDIM or element count above MAX_ELEMENTS."""


class ArchiveFormatError(ArchiveError):
    """Any other structural problem: bad dtype, bad UTF-8, ordering, trailing bytes."""


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise ArchiveFormatError(f"{name}: only float32 tensors are archivable, got {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveFormatError(f"tensor name too long ({len(raw)} bytes)")
        if arr.ndim > MAX_NDIM or arr.size > MAX_ELEMENTS:
            raise DimOverflowError(f"{name}: shape {arr.shape} exceeds archive limits")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"archive version {version}, this reader supports {VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    out: dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveFormatError(f"tensor name is not valid UTF-8: {e}") from None
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        if prev is not None and name < prev:
            raise ArchiveFormatError(f"tensor {name!r} out of sorted order")
        prev = name
        dtype, ndim = r.unpack("<BB", "dtype/ndim")
        if dtype != DTYPE_F32:
            raise ArchiveFormatError(f"{name}: unknown dtype code {dtype}")
        if ndim > MAX_NDIM:
            raise DimOverflowError(f"{name}: ndim {ndim} > {MAX_NDIM}")
        dims = r.unpack(f"<{ndim}I", "dims")
        n = 1
        for d in dims:
            n *= d
        if n > MAX_ELEMENTS:
            raise DimOverflowError(f"{name}: {n} elements exceeds {MAX_ELEMENTS}")
        payload = r.take(4 * n, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise ArchiveFormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return out


def write_archive(tensors: Mapping[str, np.ndarray], path) -> None:
    atomic_write_bytes(path, encode(tensors))


def read_archive(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_weights(params: NetworkParams, path) -> None:
    write_archive({k: t.data for k, t in params.tensors.items()}, path)


_BLOCK_RE = re.compile(r"^(enc1|enc2|mid|dec2|dec1)\.(\d+)\.")


def config_from_names(tensors: Mapping[str, np.ndarray]) -> tuple[NetworkConfig, bool]:
    """Recover (config, fused) from canonical names and shapes."""
    try:
        stem = tensors["stem.0.conv.kernel"]
        tail = tensors["tail.0.conv.kernel"]
    except KeyError as e:
        raise ArchiveFormatError(f"not a network archive: missing {e}") from None
    counts = {s: 0 for s in BLOCK_STAGES}
    for name in tensors:
        m = _BLOCK_RE.match(name)
        if m:
            counts[m.group(1)] = max(counts[m.group(1)], int(m.group(2)) + 1)
    fused = any(n.endswith(".deconv.kernel") for n in tensors)
    config = NetworkConfig(
        base_channels=int(stem.shape[0]),
        block_counts=tuple(counts[s] for s in BLOCK_STAGES),
        in_channels=int(stem.shape[1]),
        out_channels=int(tail.shape[0]),
    )
    return config, fused


def load_weights(path) -> NetworkParams:
    tensors = read_archive(path)
    config, fused = config_from_names(tensors)
    try:
        return NetworkParams(config, {k: Tensor(v) for k, v in tensors.items()}, fused=fused)
    except ValueError as e:
        raise ArchiveFormatError(f"archive does not describe a valid network: {e}") from None
