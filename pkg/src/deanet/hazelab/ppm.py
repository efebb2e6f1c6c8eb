"""Binary P6 PPM (maxval 255) reading and writing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from deanet._io import atomic_write_bytes


class PPMError(ValueError):
    pass


class PPMMagicError(PPMError):
    pass


class PPMMaxvalError(PPMError):
    pass


class PPMTruncatedError(PPMError):
    pass


@dataclass
class ImageBuffer:
    pixels: np.ndarray  # uint8 [H, W, 3]

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected uint8 [H, W, 3] pixels, got {self.pixels.dtype} {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_float(self) -> np.ndarray:
        """``[3, H, W]`` float32 in [0, 1]."""
        return (self.pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)).astype(np.float32)

    @classmethod
    def from_float(cls, chw) -> "ImageBuffer":
        """Quantize ``[3, H, W]`` floats: clamp to [0, 1], scale by 255, round half up."""
        a = np.asarray(chw, dtype=np.float64)
        if a.ndim == 4:
            a = a[0]
        q = np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5)
        return cls(np.clip(q, 0, 255).astype(np.uint8).transpose(1, 2, 0).copy())


def _header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments
    while True:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMTruncatedError("truncated PPM header")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> ImageBuffer:
    if data[:2] != b"P6":
        raise PPMMagicError(f"not a binary PPM (magic {data[:2]!r})")
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _header_token(data, pos)
        if not tok.isdigit():
            raise PPMError(f"bad {what} field {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PPMMaxvalError(f"maxval {maxval} unsupported (need 255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PPMTruncatedError("missing whitespace after PPM header")
    pos += 1
    need = w * h * 3
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PPMTruncatedError(f"payload has {len(payload)} of {need} bytes")
    return ImageBuffer(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy())


def encode_ppm(img: ImageBuffer) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def read_ppm(path) -> ImageBuffer:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(img: ImageBuffer, path) -> None:
    atomic_write_bytes(path, encode_ppm(img))
