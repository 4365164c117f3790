"""Optical-flow frame skipping.

Dense flow follows Farneback's two-frame method: each frame is locally
approximated by a quadratic polynomial ``x^T A x + b^T x + c`` (Gaussian-weighted
least squares), and the displacement ``d`` solves ``A d = -(b2 - b1) / 2``
aggregated over a box window, refined coarse-to-fine over a pyramid.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .backend import Stage, hold_until
from .core import FlowField, FrameImage, InvalidArgument, resize_array, sample_bilinear, to_grayscale
from .engine import PipelineReport, StageSpec, as_specs, check_chain, run_stages, _stats

MIN_PYRAMID_SIZE = 32
# ridge on the 2x2 normal equations; textureless regions fall back towards zero motion
DET_EPS = 1e-12


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    # half-width of the polynomial fit kernel (kernel spans 2*poly_n+1 pixels)
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if not 0.0 < self.pyramid_scale < 1.0:
            raise InvalidArgument("pyramid_scale must lie in (0, 1)")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise InvalidArgument("window_size must be a positive odd number")
        if self.poly_n < 1 or self.poly_n % 2 == 0:
            raise InvalidArgument("poly_n must be a positive odd number")
        if self.pyramid_levels < 1 or self.iterations < 1:
            raise InvalidArgument("pyramid_levels and iterations must be >= 1")
        if self.poly_sigma <= 0:
            raise InvalidArgument("poly_sigma must be > 0")


@dataclass(frozen=True)
class SkipSchedule:
    n: int = 3
    flow_resolution: str = "half"

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgument("skip interval n must be >= 1")
        if self.flow_resolution not in ("full", "half"):
            raise InvalidArgument("flow_resolution must be 'full' or 'half'")

    def frame_type(self, index: int) -> str:
        return "unet" if index % self.n == 0 else "warp"


# -- polynomial expansion ----------------------------------------------------------

def _poly_kernels(n: int, sigma: float):
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return x, g


def _inverse_gram(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # basis order: 1, x, y, x^2, y^2, xy
    gx, gy = np.meshgrid(x, x)
    w = np.outer(g, g)
    basis = np.stack([np.ones_like(gx), gx, gy, gx * gx, gy * gy, gx * gy]).reshape(6, -1)
    gram = (basis * w.ravel()) @ basis.T
    return np.linalg.inv(gram)


def poly_expansion(img: np.ndarray, poly_n: int, poly_sigma: float) -> np.ndarray:
    """Per-pixel quadratic fit. Returns HxWx5: (b_x, b_y, a_xx, a_yy, a_xy/2)."""
    x, g = _poly_kernels(poly_n, poly_sigma)
    ginv = _inverse_gram(x, g)
    f = img.astype(np.float64)

    def corr(ky, kx):
        tmp = ndimage.correlate1d(f, ky, axis=0, mode="nearest")
        return ndimage.correlate1d(tmp, kx, axis=1, mode="nearest")

    xg, xxg = x * g, x * x * g
    r = np.stack([
        corr(g, g),
        corr(g, xg),
        corr(xg, g),
        corr(g, xxg),
        corr(xxg, g),
        corr(xg, xg),
    ], axis=-1)
    coef = r @ ginv.T
    return np.stack([coef[..., 1], coef[..., 2], coef[..., 3], coef[..., 4], 0.5 * coef[..., 5]], axis=-1)


def _update_flow(p1: np.ndarray, p2: np.ndarray, flow: np.ndarray, window: int) -> np.ndarray:
    h, w = p1.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    p2w = sample_bilinear(p2, gx + flow[..., 0], gy + flow[..., 1])
    a11 = 0.5 * (p1[..., 2] + p2w[..., 2])
    a22 = 0.5 * (p1[..., 3] + p2w[..., 3])
    a12 = 0.5 * (p1[..., 4] + p2w[..., 4])
    db1 = -0.5 * (p2w[..., 0] - p1[..., 0]) + a11 * flow[..., 0] + a12 * flow[..., 1]
    db2 = -0.5 * (p2w[..., 1] - p1[..., 1]) + a12 * flow[..., 0] + a22 * flow[..., 1]
    terms = np.stack([
        a11 * a11 + a12 * a12,
        a12 * (a11 + a22),
        a22 * a22 + a12 * a12,
        a11 * db1 + a12 * db2,
        a12 * db1 + a22 * db2,
    ], axis=-1)
    terms = ndimage.uniform_filter(terms, size=(window, window, 1), mode="nearest")
    g11, g12, g22, h1, h2 = np.moveaxis(terms, -1, 0)
    det = g11 * g22 - g12 * g12
    det = det + DET_EPS
    out = np.empty_like(flow)
    out[..., 0] = (g22 * h1 - g12 * h2) / det
    out[..., 1] = (g11 * h2 - g12 * h1) / det
    return out


def _flow_array(prev: np.ndarray, nxt: np.ndarray, params: FlowParams) -> np.ndarray:
    h, w = prev.shape
    levels = []
    for k in range(params.pyramid_levels):
        scale = params.pyramid_scale ** k
        lw, lh = int(round(w * scale)), int(round(h * scale))
        if k > 0 and min(lw, lh) < MIN_PYRAMID_SIZE:
            break
        levels.append((lw, lh, scale))

    flow = None
    for lw, lh, scale in reversed(levels):
        if scale < 1.0:
            sigma = (1.0 / scale - 1.0) * 0.5
            a = resize_array(ndimage.gaussian_filter(prev, sigma, mode="nearest")[..., None], lw, lh)[..., 0]
            b = resize_array(ndimage.gaussian_filter(nxt, sigma, mode="nearest")[..., None], lw, lh)[..., 0]
        else:
            a, b = prev, nxt
        if flow is None:
            flow = np.zeros((lh, lw, 2))
        else:
            fh, fw = flow.shape[:2]
            flow = resize_array(flow, lw, lh)
            flow[..., 0] *= lw / fw
            flow[..., 1] *= lh / fh
        p1 = poly_expansion(a, params.poly_n, params.poly_sigma)
        p2 = poly_expansion(b, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            flow = _update_flow(p1, p2, flow, params.window_size)
    return flow


def farneback_flow(prev: FrameImage, next: FrameImage, params: FlowParams = FlowParams()) -> FlowField:
    """Dense flow mapping ``prev`` toward ``next``: next(p + d(p)) ~ prev(p)."""
    if prev.channels != 1 or next.channels != 1:
        raise InvalidArgument("farneback_flow needs single-channel frames")
    if prev.data.shape != next.data.shape:
        raise InvalidArgument(f"frame shapes differ: {prev.data.shape} vs {next.data.shape}")
    if min(prev.width, prev.height) < params.window_size:
        raise InvalidArgument(
            f"{prev.width}x{prev.height} frame is smaller than the {params.window_size}px window"
        )
    flow = _flow_array(prev.data[..., 0], next.data[..., 0], params)
    return FlowField(flow[..., 0], flow[..., 1])


def _gray(img: FrameImage) -> FrameImage:
    return img if img.channels == 1 else to_grayscale(img)


def upscale_flow(flow: FlowField, width: int, height: int) -> FlowField:
    """Bilinear resize of a flow field with displacements rescaled to the new grid."""
    arr = np.stack([flow.dx, flow.dy], axis=-1).astype(np.float64)
    big = resize_array(arr, width, height)
    return FlowField(big[..., 0] * (width / flow.width), big[..., 1] * (height / flow.height))


def half_res_flow(prev: FrameImage, next: FrameImage, params: FlowParams = FlowParams()) -> FlowField:
    if prev.data.shape[:2] != next.data.shape[:2]:
        raise InvalidArgument("frame shapes differ")
    if prev.width % 2 or prev.height % 2:
        raise InvalidArgument(f"half-resolution flow needs even dimensions, got {prev.width}x{prev.height}")
    hw, hh = prev.width // 2, prev.height // 2
    a = FrameImage(resize_array(_gray(prev).data, hw, hh))
    b = FrameImage(resize_array(_gray(next).data, hw, hh))
    return upscale_flow(farneback_flow(a, b, params), prev.width, prev.height)


def estimate_flow(prev: FrameImage, next: FrameImage, params: FlowParams, resolution: str = "full") -> FlowField:
    if resolution == "half":
        return half_res_flow(prev, next, params)
    return farneback_flow(_gray(prev), _gray(next), params)


def warp_bilinear(frame: FrameImage, flow: FlowField) -> FrameImage:
    """Backward warp: out(x, y) = frame(x - dx, y - dy), edge-clamped."""
    if (flow.width, flow.height) != (frame.width, frame.height):
        raise InvalidArgument(
            f"flow {flow.width}x{flow.height} does not match frame {frame.width}x{frame.height}"
        )
    gy, gx = np.mgrid[0:frame.height, 0:frame.width].astype(np.float64)
    out = sample_bilinear(frame.data, gx - flow.dx, gy - flow.dy)
    return frame.with_data(np.clip(out, 0.0, 1.0))


def theoretical_ms_per_frame(unet_ms: float, warp_ms: float, n: int) -> float:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if unet_ms < 0 or warp_ms < 0:
        raise InvalidArgument("latencies must be >= 0")
    return (unet_ms + (n - 1) * warp_ms) / n


def skip_pipeline(
    schedule: SkipSchedule,
    denoise_chain: Sequence[Stage | StageSpec],
    frames: Iterable[FrameImage],
    params: FlowParams = FlowParams(),
    warp_latency_ms: float = 0.0,
    n_frames: int | None = None,
    sink: Callable[[FrameImage], None] | None = None,
    warmup: int = 3,
) -> tuple[list[FrameImage], PipelineReport]:
    """Run the full chain every ``n`` frames and flow-warp the previous output in between.

    ``warp_latency_ms`` is a floor on warp-frame time, standing in for the
    measured warp cost of slower hardware. Outputs are collected unless a
    ``sink`` is given.
    """
    specs = as_specs(denoise_chain)
    if check_chain(specs) != "image":
        raise InvalidArgument("skip_pipeline chain must map images to images")
    timings: dict[str, list[float]] = {s.name: [] for s in specs}
    timings["flow+warp"] = []
    unet_ms: list[float] = []
    warp_ms: list[float] = []
    types: list[str] = []
    outputs: list[FrameImage] = []
    ends: list[float] = []
    prev_in = prev_out = None
    start = time.perf_counter()
    for i, frame in enumerate(frames):
        if n_frames is not None and i >= n_frames:
            break
        kind = schedule.frame_type(i)
        t0 = time.perf_counter()
        if kind == "unet":
            out = run_stages(specs, frame, timings)
            unet_ms.append((time.perf_counter() - t0) * 1000.0)
        else:
            flow = estimate_flow(prev_in, frame, params, schedule.flow_resolution)
            out = warp_bilinear(prev_out, flow)
            out.frame_id = frame.frame_id
            if warp_latency_ms > 0:
                hold_until(t0, warp_latency_ms)
            elapsed = (time.perf_counter() - t0) * 1000.0
            timings["flow+warp"].append(elapsed)
            warp_ms.append(elapsed)
        if sink is not None:
            sink(out)
        else:
            outputs.append(out)
        ends.append(time.perf_counter())
        types.append(kind)
        prev_in, prev_out = frame, out
    if not types:
        raise InvalidArgument("frame stream is empty")

    # exclude whole schedule cycles so the unet/warp mix is unchanged
    skip = math.ceil(warmup / schedule.n) * schedule.n
    if skip >= len(types):
        skip = 0
    t_begin = ends[skip - 1] if skip else start
    duration = ends[-1] - t_begin
    retained = len(types) - skip
    measured = 1000.0 * duration / retained
    u = unet_ms[math.ceil(skip / schedule.n):] or unet_ms
    w_mean = float(np.mean(warp_ms)) if warp_ms else 0.0
    model = theoretical_ms_per_frame(float(np.mean(u)), w_mean, schedule.n)
    declared = [s.declared_latency_ms for s in specs]
    notes = {
        "measured_ms_per_frame": measured,
        "model_ms_per_frame": model,
        "overhead_ms": measured - model,
        "unet_mean_ms": float(np.mean(u)),
        "warp_mean_ms": w_mean,
    }
    if all(d is not None for d in declared) and declared:
        notes["declared_ms_per_frame"] = theoretical_ms_per_frame(sum(declared), warp_latency_ms, schedule.n)
        notes["overhead_vs_declared_ms"] = measured - notes["declared_ms_per_frame"]
    report = PipelineReport(
        stages={name: _stats(v, 0) for name, v in timings.items() if v},
        end_to_end_mean_ms=measured,
        achieved_fps=1000.0 / measured,
        frames_displayed=retained,
        dropped_frames=0,
        duration_s=duration,
        mode="flowskip",
        displayed_ids=[],
        frame_types=types,
        notes=notes,
    )
    return outputs, report
