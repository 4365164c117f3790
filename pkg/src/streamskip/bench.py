"""Benchmark harness: timing statistics, scenario runner and table emission."""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .backend import FunctionStage, LatencyProfile, StubStage, profile_preset, stub_decode, stub_denoise, stub_encode
from .core import FrameImage, InvalidArgument, Seed
from .engine import PipelineReport, TimingStats, predict_fps, run_sequential, run_threaded, split_for_threads
from .flowskip import FlowParams, SkipSchedule, skip_pipeline, theoretical_ms_per_frame

__all__ = [
    "BenchScenario",
    "ScenarioResult",
    "TimingStats",
    "emit_table",
    "measure",
    "parse_csv",
    "run_scenario",
]

FOOTER = (
    "Stage times are replayed by sleep-based stubs from measured per-stage latencies; "
    "the FPS columns check the scheduling and throughput arithmetic, not the original hardware."
)

SEQUENTIAL_BAND = (0.85, 1.05)
THREADED_BAND = (0.85, 1.15)
FLOWSKIP_TOLERANCE = 0.10
# auto-batch calls shorter than this many clock ticks
RESOLUTION_GUARD = 50


def measure(fn: Callable[[], object], warmup: int = 3, iters: int = 50) -> TimingStats:
    """Time ``iters`` calls of ``fn`` and keep all but the first ``warmup``."""
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    if warmup < 0 or warmup >= iters:
        raise InvalidArgument(f"warmup ({warmup}) must be smaller than iters ({iters})")
    resolution = time.get_clock_info("perf_counter").resolution
    t0 = time.perf_counter()
    fn()
    probe = time.perf_counter() - t0
    batch = 1
    if probe < RESOLUTION_GUARD * resolution:
        batch = math.ceil(RESOLUTION_GUARD * resolution / max(probe, resolution))
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        for _ in range(batch):
            fn()
        samples.append((time.perf_counter() - t0) * 1000.0 / batch)
    return TimingStats.from_samples(samples[warmup:], warmup_excluded=warmup)


class BenchScenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    mode: Literal["sequential", "threaded", "flowskip", "knn"]
    profile: str | None = None
    stages: dict[str, float] | None = None
    parameters: dict[str, float | int | str] = {}
    frames: int | None = None
    duration_s: float | None = None

    @model_validator(mode="after")
    def _complete(self):
        if self.mode in ("sequential", "threaded", "knn") and not (self.profile or self.stages):
            raise ValueError(f"{self.mode} scenario {self.name!r} needs a profile or stages")
        if self.mode == "threaded" and self.duration_s is None:
            raise ValueError(f"threaded scenario {self.name!r} needs duration_s")
        if self.mode in ("sequential", "flowskip", "knn") and self.frames is None:
            raise ValueError(f"{self.mode} scenario {self.name!r} needs frames")
        if self.mode == "flowskip":
            missing = {"n", "unet_ms", "warp_ms"} - set(self.parameters)
            if missing:
                raise ValueError(f"flowskip scenario {self.name!r} missing parameters {sorted(missing)}")
        if self.frames is not None and self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ValueError("duration_s must be > 0")
        return self

    def latency_profile(self) -> LatencyProfile | None:
        if self.profile:
            return profile_preset(self.profile)
        return None


@dataclass
class ScenarioResult:
    name: str
    mode: str
    report: PipelineReport
    predicted_fps: float | None
    measured_fps: float
    ratio: float | None
    flagged: bool = False
    notes: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, object]:
        return {
            "scenario": self.name,
            "mode": self.mode,
            "predicted_fps": self.predicted_fps,
            "measured_fps": self.measured_fps,
            "ratio": self.ratio,
            "flagged": self.flagged,
            **{f"stage:{name}": st.mean_ms for name, st in self.report.stages.items()},
        }


def _pool(width: int, height: int, seed: int, size: int = 8) -> list[FrameImage]:
    rng = np.random.default_rng(seed)
    return [FrameImage(rng.random((height, width, 3), dtype=np.float32)) for _ in range(size)]


def looped(frames: list[FrameImage], count: int | None = None):
    """Cycle a pre-generated pool so frame synthesis stays out of the timed loop."""
    for i in itertools.islice(itertools.count(), count):
        src = frames[i % len(frames)]
        yield FrameImage(src.data, frame_id=i)


def _stub_chain(s: BenchScenario, seed: int) -> list:
    prof = s.latency_profile()
    if prof is not None:
        return prof.stages(seed)
    return [StubStage(name if name in ("preprocess", "encode", "denoise", "decode", "postprocess") else "custom",
                      ms, seed, name=name) for name, ms in (s.stages or {}).items()]


def _declared(chain) -> list[float]:
    return [st.latency_ms for st in chain]


def _band_check(ratio: float | None, band: tuple[float, float]) -> bool:
    return ratio is not None and not (band[0] <= ratio <= band[1])


def run_scenario(s: BenchScenario, seed: int = 0) -> ScenarioResult:
    p = s.parameters
    width, height = int(p.get("width", 256)), int(p.get("height", 256))
    if s.mode == "sequential":
        chain = _stub_chain(s, seed)
        report = run_sequential(chain, looped(_pool(width, height, seed)), s.frames)
        predicted = predict_fps(_declared(chain), "sequential")
        ratio = report.achieved_fps / predicted
        return ScenarioResult(s.name, s.mode, report, predicted, report.achieved_fps, ratio,
                              _band_check(ratio, SEQUENTIAL_BAND))

    if s.mode == "threaded":
        chain = _stub_chain(s, seed)
        cap, inf, dis = split_for_threads(chain)
        capture_fps = float(p["capture_fps"]) if "capture_fps" in p else None
        report = run_threaded(looped(_pool(width, height, seed)), inf, None, s.duration_s,
                              capture_stages=cap, display_stages=dis, capture_fps=capture_fps)
        groups = [sum(_declared(g)) for g in (cap, inf, dis) if g]
        predicted = predict_fps(groups, "threaded")
        if capture_fps:
            predicted = min(predicted, capture_fps)
        ratio = report.achieved_fps / predicted
        return ScenarioResult(s.name, s.mode, report, predicted, report.achieved_fps, ratio,
                              _band_check(ratio, THREADED_BAND))

    if s.mode == "flowskip":
        return _run_flowskip(s, seed)
    return _run_knn(s, seed)


def unet_stage(unet_ms: float, seed: int) -> FunctionStage:
    """Encode, denoise and decode as one stage held to ``unet_ms``."""
    sd = Seed(seed)
    return FunctionStage(lambda f: stub_decode(stub_denoise(stub_encode(f), sd)), "unet", latency_ms=unet_ms)


def _run_flowskip(s: BenchScenario, seed: int) -> ScenarioResult:
    p = s.parameters
    width, height = int(p.get("width", 64)), int(p.get("height", 64))
    n, unet_ms, warp_ms = int(p["n"]), float(p["unet_ms"]), float(p["warp_ms"])
    schedule = SkipSchedule(n, str(p.get("resolution", "half")))
    from .cli import synthetic_frames

    frames = list(synthetic_frames("bandlimited-noise", (1.0, 0.5), s.frames, width, height, seed))
    _, report = skip_pipeline(schedule, [unet_stage(unet_ms, seed)], frames, FlowParams(),
                              warp_latency_ms=warp_ms, sink=lambda _: None)
    theory = theoretical_ms_per_frame(unet_ms, warp_ms, n)
    measured_ms = report.notes["measured_ms_per_frame"]
    notes = {
        "theoretical_ms_per_frame": theory,
        "measured_ms_per_frame": measured_ms,
        "overhead_ms": measured_ms - theory,
    }
    predicted = 1000.0 / theory
    ratio = report.achieved_fps / predicted
    flagged = abs(measured_ms - theory) > FLOWSKIP_TOLERANCE * theory
    return ScenarioResult(s.name, s.mode, report, predicted, report.achieved_fps, ratio, flagged, notes)


def _run_knn(s: BenchScenario, seed: int) -> ScenarioResult:
    from .cli import build_knn_pipeline

    p = s.parameters
    width, height = int(p.get("width", 64)), int(p.get("height", 64))
    chain, _ = build_knn_pipeline(
        variant=str(p.get("variant", "clip")),
        index_kind=str(p.get("index", "flat")),
        store_size=int(p.get("store_size", 256)),
        k=int(p.get("k", 4)),
        width=width,
        height=height,
        seed=seed,
        latencies=s.stages or {},
        nlist=int(p.get("nlist", 4)),
        nprobe=int(p.get("nprobe", 2)),
    )
    report = run_sequential(chain, looped(_pool(width, height, seed)), s.frames)
    declared = _declared(chain)
    predicted = predict_fps(declared, "sequential") if all(d > 0 for d in declared) else None
    ratio = report.achieved_fps / predicted if predicted else None
    return ScenarioResult(s.name, s.mode, report, predicted, report.achieved_fps, ratio,
                          _band_check(ratio, SEQUENTIAL_BAND))


# -- tables ------------------------------------------------------------------------------------

def _fmt(v, digits=2) -> str:
    if v is None:
        return "n/a"
    return f"{v:.{digits}f}"


def _columns(results: list[ScenarioResult]) -> list[str]:
    cols = ["scenario", "mode", "predicted_fps", "measured_fps", "ratio", "flagged"]
    for r in results:
        for key in r.row():
            if key not in cols:
                cols.append(key)
    return cols


def emit_table(results: list[ScenarioResult], fmt: str = "markdown") -> str:
    if not results:
        raise InvalidArgument("no scenario results to emit")
    if fmt == "csv":
        cols = _columns(results)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in results:
            row = r.row()
            writer.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                             for c in cols])
        return buf.getvalue()
    if fmt != "markdown":
        raise InvalidArgument(f"unknown format {fmt!r}")

    out = [
        "| Scenario | Mode | Predicted FPS | Measured FPS | Ratio | Breakdown |",
        "|---|---|---|---|---|---|",
    ]
    for r in results:
        breakdown = " + ".join(f"{name} {st.mean_ms:.1f}" for name, st in r.report.stages.items())
        flag = " (!)" if r.flagged else ""
        out.append(
            f"| {r.name} | {r.mode} | {_fmt(r.predicted_fps)} | {_fmt(r.measured_fps)} | "
            f"{_fmt(r.ratio, 3)}{flag} | {breakdown} |"
        )
    for r in results:
        out += ["", f"### {r.name}", "", r.report.to_markdown().rstrip()]
        if r.report.dropped_frames or r.mode == "threaded":
            out.append(f"\nDropped frames: {r.report.dropped_frames}")
        if r.notes:
            out.append("")
            out += [f"- {k}: {v:.2f}" for k, v in r.notes.items()]
    out += ["", FOOTER, ""]
    return "\n".join(out)


def parse_csv(text: str) -> list[dict[str, object]]:
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row: dict[str, object] = {}
        for key, val in raw.items():
            if key in ("scenario", "mode"):
                row[key] = val
            elif key == "flagged":
                row[key] = val == "True"
            else:
                row[key] = float(val) if val != "" else None
        rows.append(row)
    return rows
