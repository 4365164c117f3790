"""Temporal-coherence operators: fixed-seed noise, latent feedback, EMA, lerp."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import rng
from .core import FrameImage, InvalidArgument, LatentTensor, Seed


@dataclass
class NoiseConfig:
    seed: Seed = Seed(0)
    strength: float = 0.1

    def __post_init__(self):
        if not isinstance(self.seed, Seed):
            self.seed = Seed(self.seed)
        if self.strength < 0:
            raise InvalidArgument("noise strength must be >= 0")


@dataclass
class FeedbackState:
    alpha: float = 0.3
    prev_latent: LatentTensor | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgument(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class EmaState:
    # weight on the incoming frame
    beta: float = 0.4
    accum: FrameImage | None = None
    # float64 running value; ``accum`` is its float32 view
    _acc: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise InvalidArgument(f"beta must lie in (0, 1], got {self.beta}")


@lru_cache(maxsize=16)
def _noise_tensor(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    noise = rng.standard_normal(seed, int(np.prod(shape))).reshape(shape)
    noise.setflags(write=False)
    return noise


def noise_tensor(seed: Seed, shape: tuple[int, ...]) -> np.ndarray:
    """The standard-normal tensor for ``seed``; identical for every call with the same shape."""
    return _noise_tensor(seed.value, tuple(shape))


def add_noise(lat: LatentTensor, cfg: NoiseConfig) -> LatentTensor:
    if cfg.strength == 0:
        return LatentTensor(lat.data.copy(), lat.source_frame_id)
    out = lat.data + cfg.strength * noise_tensor(cfg.seed, lat.shape)
    return LatentTensor(out, lat.source_frame_id)


def feedback_blend(new_lat: LatentTensor, state: FeedbackState) -> LatentTensor:
    """First-order IIR on latents; the blended output becomes the next ``prev``."""
    prev = state.prev_latent
    if prev is None:
        out = LatentTensor(new_lat.data.copy(), new_lat.source_frame_id)
    else:
        if prev.shape != new_lat.shape:
            raise InvalidArgument(f"latent shape {new_lat.shape} does not match previous {prev.shape}")
        a = state.alpha
        out = LatentTensor((1.0 - a) * new_lat.data + a * prev.data, new_lat.source_frame_id)
    state.prev_latent = out
    return out


def ema_update(state: EmaState, frame: FrameImage) -> FrameImage:
    if state.accum is None or state._acc is None:
        state._acc = frame.data.astype(np.float64)
    else:
        if state._acc.shape != frame.data.shape:
            raise InvalidArgument(
                f"frame shape {frame.data.shape} does not match EMA state {state._acc.shape}"
            )
        b = state.beta
        state._acc = np.clip(b * frame.data.astype(np.float64) + (1.0 - b) * state._acc, 0.0, 1.0)
    state.accum = frame.with_data(state._acc)
    return state.accum.with_data(state.accum.data.copy())


def linear_interpolate(a: FrameImage, b: FrameImage, t: float) -> FrameImage:
    if a.data.shape != b.data.shape:
        raise InvalidArgument(f"frame shapes differ: {a.data.shape} vs {b.data.shape}")
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return a.with_data(a.data.copy())
    if t == 1.0:
        return b.with_data(b.data.copy())
    out = (1.0 - t) * a.data.astype(np.float64) + t * b.data.astype(np.float64)
    return b.with_data(np.clip(out, 0.0, 1.0))
