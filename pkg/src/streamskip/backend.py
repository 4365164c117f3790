"""Pluggable pipeline stages, deterministic stubs and latency presets.

Stub stages stand in for the real preprocess / VAE / UNet / display work: each
does a cheap deterministic transform and then holds until its configured latency
has elapsed, so a pipeline of stubs reproduces the timing of the measured one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields

import numpy as np

from . import rng
from .core import (
    LATENT_CHANNELS,
    LATENT_SCALE,
    FrameImage,
    InvalidArgument,
    LatentTensor,
    Seed,
)

STAGE_KINDS = ("preprocess", "encode", "denoise", "decode", "postprocess")


class PresetNotFound(KeyError):
    pass


def hold_until(start: float, latency_ms: float) -> None:
    """Sleep until ``latency_ms`` has passed since ``start`` (a perf_counter value)."""
    deadline = start + latency_ms / 1000.0
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(remaining)


class Stage:
    """Base stage. Subclasses override ``transform``.

    A stage is owned by one worker at a time; it is never called concurrently.
    """

    kind = "custom"

    def __init__(self, name: str | None = None, latency_ms: float = 0.0):
        if latency_ms < 0:
            raise InvalidArgument("latency_ms must be >= 0")
        self.name = name or self.kind
        self.latency_ms = float(latency_ms)

    def transform(self, x):
        return x

    def process(self, x):
        start = time.perf_counter()
        out = self.transform(x)
        if self.latency_ms > 0:
            hold_until(start, self.latency_ms)
        return out

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, latency_ms={self.latency_ms})"


class FunctionStage(Stage):
    """Wraps a plain callable as a stage.

    ``input_type``/``output_type`` ("image", "latent", "embedding") let the
    engine type-check chains containing custom stages.
    """

    def __init__(self, fn, name: str, kind: str = "custom", latency_ms: float = 0.0,
                 input_type: str | None = None, output_type: str | None = None):
        super().__init__(name, latency_ms)
        self.kind = kind
        self._fn = fn
        self.input_type = input_type
        self.output_type = output_type

    def transform(self, x):
        return self._fn(x)


class StubStage(Stage):
    def __init__(self, kind: str, latency_ms: float = 0.0, seed: Seed | int = 0, name: str | None = None):
        self.kind = kind
        super().__init__(name or kind, latency_ms)
        self.transform_seed = seed if isinstance(seed, Seed) else Seed(seed)

    def transform(self, x):
        if self.kind == "encode":
            return stub_encode(x)
        if self.kind == "denoise":
            return stub_denoise(x, self.transform_seed)
        if self.kind == "decode":
            return stub_decode(x)
        return x


def stub_encode(img: FrameImage) -> LatentTensor:
    if img.channels != 3:
        raise InvalidArgument("stub_encode needs a 3-channel image")
    if img.width % LATENT_SCALE or img.height % LATENT_SCALE:
        raise InvalidArgument(
            f"image size {img.width}x{img.height} is not divisible by {LATENT_SCALE}"
        )
    h, w = img.height // LATENT_SCALE, img.width // LATENT_SCALE
    blocks = img.data.astype(np.float64).reshape(h, LATENT_SCALE, w, LATENT_SCALE, 3)
    means = blocks.mean(axis=(1, 3))
    lat = np.zeros((LATENT_CHANNELS, h, w), dtype=np.float64)
    lat[:3] = np.moveaxis(2.0 * means - 1.0, 2, 0)
    return LatentTensor(lat, source_frame_id=img.frame_id)


def stub_decode(lat: LatentTensor) -> FrameImage:
    if lat.channels != LATENT_CHANNELS:
        raise InvalidArgument(f"stub_decode needs a {LATENT_CHANNELS}-channel latent")
    rgb = (lat.data[:3].astype(np.float64) + 1.0) * 0.5
    rgb = np.repeat(np.repeat(rgb, LATENT_SCALE, axis=1), LATENT_SCALE, axis=2)
    return FrameImage(np.clip(np.moveaxis(rgb, 0, 2), 0.0, 1.0), frame_id=lat.source_frame_id)


def denoise_params(seed: Seed, channels: int) -> dict[str, np.ndarray]:
    """Per-channel gain, bias, pattern frequencies and phase drawn from the seed stream."""
    u = rng.uniform(seed.value, 5 * channels).reshape(channels, 5)
    return {
        "gain": 0.8 + 0.4 * u[:, 0],
        "bias": -0.2 + 0.4 * u[:, 1],
        "fx": 1.0 + np.floor(4.0 * u[:, 2]),
        "fy": 1.0 + np.floor(4.0 * u[:, 3]),
        "phase": 2.0 * np.pi * u[:, 4],
    }


def stub_denoise(lat: LatentTensor, seed: Seed | int = 0) -> LatentTensor:
    """Seeded per-channel affine plus a 0.05-amplitude sinusoidal pattern."""
    seed = seed if isinstance(seed, Seed) else Seed(seed)
    c, h, w = lat.shape
    p = denoise_params(seed, c)
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    arg = 2.0 * np.pi * (p["fx"][:, None, None] * xs[None, None, :] + p["fy"][:, None, None] * ys[None, :, None])
    pattern = 0.05 * np.sin(arg + p["phase"][:, None, None])
    out = p["gain"][:, None, None] * lat.data.astype(np.float64) + p["bias"][:, None, None] + pattern
    return LatentTensor(out, source_frame_id=lat.source_frame_id)


@dataclass(frozen=True)
class LatencyProfile:
    name: str
    preprocess_ms: float
    encode_ms: float
    denoise_ms: float
    decode_ms: float
    postprocess_ms: float
    # per-frame time not attributed to any stage (reported total minus stage sum)
    overhead_ms: float = 0.0
    note: str = ""

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_ms") and getattr(self, f.name) < 0:
                raise InvalidArgument(f"{f.name} must be >= 0")

    def latencies(self) -> dict[str, float]:
        return {kind: getattr(self, f"{kind}_ms") for kind in STAGE_KINDS}

    @property
    def total_ms(self) -> float:
        return sum(self.latencies().values()) + self.overhead_ms

    def stages(self, seed: Seed | int = 0, scale: float = 1.0) -> list[StubStage]:
        """One stub per stage kind, plus a pass-through "overhead" stage when ``overhead_ms`` > 0."""
        out = [StubStage(kind, ms * scale, seed) for kind, ms in self.latencies().items()]
        if self.overhead_ms > 0:
            out.append(overhead_stage(self.overhead_ms * scale))
        return out


def overhead_stage(latency_ms: float) -> StubStage:
    return StubStage("custom", latency_ms, name="overhead")


PRESETS = {
    "sdturbo-coreml": LatencyProfile(
        "sdturbo-coreml", 7.9, 6.5, 53.2, 6.5, 2.4, overhead_ms=1.2,
        note="stages sum to 76.5 ms against a reported 77.7 ms total; the 1.2 ms gap is overhead",
    ),
    "sdxs-coreml": LatencyProfile(
        "sdxs-coreml", 5.0, 5.0, 24.4, 5.0, 5.0,
        note="pre/post ~10 ms aggregate split evenly; sums to 44.4 ms against a reported 44.1 ms total",
    ),
    "pix2pix-turbo": LatencyProfile(
        "pix2pix-turbo", 18.5, 80.0, 53.0, 80.0, 18.5,
        note="VAE 160 ms split 80/80, pre/post 37 ms split evenly",
    ),
    "custom": LatencyProfile("custom", 0.0, 0.0, 0.0, 0.0, 0.0, note="all-zero template"),
}


def profile_preset(name: str) -> LatencyProfile:
    try:
        return PRESETS[name]
    except KeyError:
        raise PresetNotFound(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}") from None
