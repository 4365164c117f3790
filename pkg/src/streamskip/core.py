"""Frame, latent and flow value types plus the primitive raster operations."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LATENT_CHANNELS = 4
LATENT_SCALE = 8

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

FRAM_MAGIC = b"FRAM"


class InvalidArgument(ValueError):
    """Raised when an operation's preconditions are violated."""


@dataclass
class FrameImage:
    """H x W x C raster with samples in [0, 1].

    ``capture_timestamp`` is monotonic-clock nanoseconds, 0 for frames that were
    never captured (files, synthetic streams before scheduling).
    """

    data: np.ndarray
    frame_id: int = 0
    capture_timestamp: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise InvalidArgument(f"frame data must be HxWx1 or HxWx3, got {data.shape}")
        if data.size and not (np.all(data >= 0.0) and np.all(data <= 1.0)):
            raise InvalidArgument("frame samples must lie in [0, 1]")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "FrameImage":
        return FrameImage(data, self.frame_id, self.capture_timestamp)


@dataclass
class LatentTensor:
    """C x H x W latent; values unbounded but finite. Stored as float64."""

    data: np.ndarray
    source_frame_id: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise InvalidArgument(f"latent data must be CxHxW, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgument("latent contains non-finite values")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class FlowField:
    """Per-pixel displacement (dx, dy) in pixels."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float32)
        self.dy = np.asarray(self.dy, dtype=np.float32)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise InvalidArgument("dx and dy must be equal-shaped 2-D arrays")
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.dy))):
            raise InvalidArgument("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @classmethod
    def constant(cls, width: int, height: int, dx: float, dy: float) -> "FlowField":
        return cls(np.full((height, width), dx), np.full((height, width), dy))

    def mean(self) -> tuple[float, float]:
        return float(self.dx.mean()), float(self.dy.mean())


@dataclass
class EmbeddingVector:
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32).ravel()
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgument("embedding contains non-finite values")
        if self.normalized:
            norm = float(np.linalg.norm(self.data.astype(np.float64)))
            if abs(norm - 1.0) > 1e-5:
                raise InvalidArgument(f"embedding flagged normalized but has norm {norm}")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Seed:
    value: int = 0

    def __post_init__(self):
        object.__setattr__(self, "value", int(self.value) & 0xFFFFFFFFFFFFFFFF)


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an HxWxC array at float pixel coordinates with edge clamping.

    Pixel (i, j) has its center at x=j, y=i. Computation is float64.
    """
    h, w = img.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    src = img.astype(np.float64, copy=False)
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def resize_array(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of an HxWxC array (half-pixel centers, edge clamp)."""
    if out_w < 1 or out_h < 1:
        raise InvalidArgument(f"target size must be positive, got {out_w}x{out_h}")
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(arr, gx, gy).astype(arr.dtype)


def resize_bilinear(img: FrameImage, out_w: int, out_h: int) -> FrameImage:
    return img.with_data(resize_array(img.data, out_w, out_h))


def to_grayscale(img: FrameImage) -> FrameImage:
    if img.channels != 3:
        raise InvalidArgument(f"to_grayscale needs 3 channels, got {img.channels}")
    rgb = img.data.astype(np.float64)
    gray = rgb[..., 0] * GRAY_WEIGHTS[0] + rgb[..., 1] * GRAY_WEIGHTS[1] + rgb[..., 2] * GRAY_WEIGHTS[2]
    return img.with_data(np.clip(gray, 0.0, 1.0)[..., None])


# -- frame I/O ---------------------------------------------------------------

def write_ppm(path: str | Path, img: FrameImage) -> None:
    data = img.data
    if img.channels == 1:
        data = np.repeat(data, 3, axis=2)
    raw = np.round(data * 255.0).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raw.tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    while len(tokens) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_ppm(path: str | Path, frame_id: int = 0) -> FrameImage:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise InvalidArgument(f"{path}: not a binary PPM (P6)")
    (w, h, maxval), offset = _ppm_tokens(buf, 3)
    if maxval != 255:
        raise InvalidArgument(f"{path}: only 8-bit PPM is supported")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return FrameImage(raw.reshape(h, w, 3).astype(np.float32) / 255.0, frame_id=frame_id)


def write_fram(path: str | Path, img: FrameImage) -> None:
    header = FRAM_MAGIC + struct.pack("<III", img.width, img.height, img.channels)
    Path(path).write_bytes(header + img.data.astype("<f4").tobytes())


def read_fram(path: str | Path, frame_id: int = 0) -> FrameImage:
    buf = Path(path).read_bytes()
    if buf[:4] != FRAM_MAGIC:
        raise InvalidArgument(f"{path}: bad FRAM magic")
    w, h, c = struct.unpack_from("<III", buf, 4)
    data = np.frombuffer(buf, dtype="<f4", count=w * h * c, offset=16)
    return FrameImage(data.reshape(h, w, c), frame_id=frame_id)


def read_frame(path: str | Path, frame_id: int = 0) -> FrameImage:
    if Path(path).suffix.lower() == ".fram":
        return read_fram(path, frame_id)
    return read_ppm(path, frame_id)
