"""Grayscale PGM I/O and separable nearest/bilinear/bicubic resampling.

Resampling uses pixel-centre alignment (output pixel ``i`` samples source
coordinate ``(i + 0.5) * in / out - 0.5``), replicated borders and, when
shrinking with ``antialias=True``, a kernel stretched by ``in / out``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import PGMHeaderError, PGMMaxValueError, PGMSizeError

KINDS = ("nearest", "bilinear", "bicubic")


@dataclass
class GrayImage:
    """Row-major grayscale image normalised to [0, 1]."""

    pixels: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"GrayImage needs a 2-D array, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit depth must be 8 or 16, got {self.bit_depth}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def max_value(self) -> int:
        return 255 if self.bit_depth == 8 else 65535


_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes) -> tuple[int, int, int, int]:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _HEADER_TOKEN.match(buf, pos)
        if m is None:
            raise PGMHeaderError("incomplete PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PGMHeaderError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMHeaderError("non-integer field in PGM header") from None
    if width < 1 or height < 1:
        raise PGMHeaderError(f"invalid PGM dimensions {width}x{height}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PGMHeaderError("missing whitespace after PGM max value")
    return width, height, maxval, pos + 1


def decode_pgm(buf: bytes) -> GrayImage:
    width, height, maxval, offset = _parse_header(buf)
    if maxval not in (255, 65535):
        raise PGMMaxValueError(f"unsupported max value {maxval} (need 255 or 65535)")
    dtype = np.dtype(np.uint8) if maxval == 255 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    body = buf[offset:]
    if len(body) != expected:
        raise PGMSizeError(f"pixel section has {len(body)} bytes, expected {expected}")
    raw = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return GrayImage(raw.astype(np.float64) / maxval, bit_depth=8 if maxval == 255 else 16)


def read_pgm(path) -> GrayImage:
    return decode_pgm(Path(path).read_bytes())


def quantize(pixels: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Round-half-up onto the integer grid of the given bit depth."""
    maxval = 255 if bit_depth == 8 else 65535
    q = np.floor(np.clip(pixels, 0.0, 1.0) * maxval + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else ">u2")


def encode_pgm(img: GrayImage, bit_depth: int | None = None) -> bytes:
    depth = bit_depth or img.bit_depth
    q = quantize(img.pixels, depth)
    maxval = 255 if depth == 8 else 65535
    return f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii") + q.tobytes()


def write_pgm(img: GrayImage, path, bit_depth: int | None = None) -> None:
    Path(path).write_bytes(encode_pgm(img, bit_depth))


@dataclass(frozen=True)
class ResampleMethod:
    kind: str = "bicubic"
    a: float = -0.5
    antialias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown resample kind {self.kind!r}; expected one of {KINDS}")

    @property
    def tag(self) -> str:
        """Stable identifier recorded alongside cached data."""
        parts = [self.kind]
        if self.kind == "bicubic":
            parts.append(f"a={self.a:g}")
        parts.append(f"aa={int(self.antialias)}")
        return ":".join(parts + ["center", "clamp"])


BICUBIC_AA = ResampleMethod("bicubic", -0.5, True)


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def linear_kernel(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(x, dtype=np.float64)))


@lru_cache(maxsize=256)
def weight_matrix(in_size: int, out_size: int, method: ResampleMethod) -> np.ndarray:
    """``[out_size, in_size]`` matrix whose rows resample one output pixel."""
    ratio = in_size / out_size
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    if method.kind == "nearest":
        src = np.minimum(np.floor((np.arange(out_size) + 0.5) * ratio).astype(int), in_size - 1)
        mat[np.arange(out_size), src] = 1.0
        mat.setflags(write=False)
        return mat

    if method.kind == "bicubic":
        kernel, radius = (lambda t: cubic_kernel(t, method.a)), 2.0
    else:
        kernel, radius = linear_kernel, 1.0
    stretch = max(ratio, 1.0) if method.antialias else 1.0
    support = radius * stretch
    for i in range(out_size):
        center = (i + 0.5) * ratio - 0.5
        taps = np.arange(int(np.floor(center - support)), int(np.ceil(center + support)) + 1)
        w = kernel((taps - center) / stretch)
        w /= w.sum()
        np.add.at(mat[i], np.clip(taps, 0, in_size - 1), w)
    mat.setflags(write=False)
    return mat


def resample_array(pixels: np.ndarray, out_h: int, out_w: int, method: ResampleMethod = BICUBIC_AA) -> np.ndarray:
    """Resample the last two axes of ``pixels``; leading axes are treated as a batch."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_w}x{out_h}")
    arr = np.asarray(pixels, dtype=np.float64)
    in_h, in_w = arr.shape[-2:]
    wy = weight_matrix(in_h, out_h, method)
    wx = weight_matrix(in_w, out_w, method)
    return np.clip(wy @ arr @ wx.T, 0.0, 1.0)


def resample(img: GrayImage, out_w: int, out_h: int, method: ResampleMethod = BICUBIC_AA) -> GrayImage:
    return GrayImage(resample_array(img.pixels, out_h, out_w, method), bit_depth=img.bit_depth)


def downsample(pixels: np.ndarray, scale: int, method: ResampleMethod = BICUBIC_AA) -> np.ndarray:
    """The LR degradation shared by dataset preparation and evaluation."""
    h, w = np.shape(pixels)[-2:]
    if h % scale or w % scale:
        raise ValueError(f"{w}x{h} is not divisible by scale {scale}")
    return resample_array(pixels, h // scale, w // scale, method)


def upscale(pixels: np.ndarray, scale: int, kind: str = "bicubic") -> np.ndarray:
    h, w = np.shape(pixels)[-2:]
    return resample_array(pixels, h * scale, w * scale, ResampleMethod(kind, antialias=False))


def crop_to_multiple(pixels: np.ndarray, scale: int) -> np.ndarray:
    h, w = pixels.shape[-2:]
    return pixels[..., : h - h % scale, : w - w % scale]


def retained_fraction(scale: int) -> float:
    """Share of HR pixels that survive an integer downsampling by ``scale``."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    return 1.0 / (scale * scale)
