"""Pipeline scheduling: single-thread sequential runs and the capture/infer/display model.

The threaded model connects three workers with two capacity-1 latest-wins
mailboxes. A put never blocks; when it overwrites an item the consumer never
saw, that frame counts as dropped.
"""

from __future__ import annotations

import csv
import io
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .backend import Stage
from .core import FrameImage, InvalidArgument

log = logging.getLogger(__name__)

WARMUP_FRAMES = 3

_KIND_TYPES = {
    "preprocess": ("image", "image"),
    "encode": ("image", "latent"),
    "denoise": ("latent", "latent"),
    "decode": ("latent", "image"),
    "postprocess": ("image", "image"),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, frame_id: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed on frame {frame_id}: {cause!r}")
        self.stage = stage
        self.frame_id = frame_id
        self.__cause__ = cause


class WorkerError(RuntimeError):
    def __init__(self, worker: str, cause: BaseException):
        super().__init__(f"{worker} worker failed: {cause!r}")
        self.worker = worker
        self.__cause__ = cause


@dataclass
class StageSpec:
    name: str
    executor: Stage
    declared_latency_ms: float | None = None

    @classmethod
    def of(cls, stage: Stage) -> "StageSpec":
        return cls(stage.name, stage, stage.latency_ms or None)


def as_specs(stages: Sequence[Stage | StageSpec]) -> list[StageSpec]:
    specs = [s if isinstance(s, StageSpec) else StageSpec.of(s) for s in stages]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InvalidArgument(f"stage names must be unique, got {names}")
    return specs


def check_chain(specs: Sequence[StageSpec], start: str = "image") -> str:
    """Verify image/latent compatibility of a chain by stage kind; return the output type.

    Custom stages without declared ``input_type``/``output_type`` pass through
    whatever type they receive.
    """
    current = start
    for spec in specs:
        kind = getattr(spec.executor, "kind", "custom")
        if kind in _KIND_TYPES:
            expects, produces = _KIND_TYPES[kind]
        else:
            expects = getattr(spec.executor, "input_type", None) or current
            produces = getattr(spec.executor, "output_type", None) or expects
        if current != expects:
            raise InvalidArgument(f"stage {spec.name!r} ({kind}) expects {expects} but receives {current}")
        current = produces
    return current


# -- statistics ----------------------------------------------------------------

@dataclass
class TimingStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float
    samples: int
    warmup_excluded: int = 0

    @classmethod
    def from_samples(cls, samples_ms: Sequence[float], warmup_excluded: int = 0) -> "TimingStats":
        arr = np.asarray(samples_ms, dtype=np.float64)
        if arr.size == 0:
            raise InvalidArgument("no retained timing samples")
        p50, p95 = np.percentile(arr, [50, 95])
        return cls(
            mean_ms=float(arr.mean()),
            p50_ms=float(p50),
            p95_ms=float(p95),
            min_ms=float(arr.min()),
            max_ms=float(arr.max()),
            samples=int(arr.size),
            warmup_excluded=warmup_excluded,
        )


def _stats(samples: list[float], warmup: int) -> TimingStats:
    skip = warmup if len(samples) > warmup else 0
    return TimingStats.from_samples(samples[skip:], warmup_excluded=skip)


@dataclass
class PipelineReport:
    stages: dict[str, TimingStats]
    end_to_end_mean_ms: float
    achieved_fps: float
    frames_displayed: int
    dropped_frames: int
    duration_s: float
    mode: str = "sequential"
    displayed_ids: list[int] = field(default_factory=list)
    frame_types: list[str] = field(default_factory=list)
    notes: dict[str, float] = field(default_factory=dict)

    @property
    def ms_per_frame(self) -> float:
        return 1000.0 / self.achieved_fps if self.achieved_fps > 0 else float("inf")

    def proportions(self) -> dict[str, float]:
        total = sum(s.mean_ms for s in self.stages.values())
        if total <= 0:
            return {name: 0.0 for name in self.stages}
        return {name: 100.0 * s.mean_ms / total for name, s in self.stages.items()}

    def to_markdown(self) -> str:
        props = self.proportions()
        lines = ["| Stage | Time | Proportion |", "|---|---|---|"]
        for name, st in self.stages.items():
            lines.append(f"| {name} | {st.mean_ms:.1f}ms | {props[name]:.0f}% |")
        total = sum(s.mean_ms for s in self.stages.values())
        lines.append(f"| Total | {total:.1f}ms | {self.achieved_fps:.1f} FPS |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "mean_ms", "p50_ms", "p95_ms"])
        for name, st in self.stages.items():
            writer.writerow([name, repr(st.mean_ms), repr(st.p50_ms), repr(st.p95_ms)])
        return buf.getvalue()


# -- sequential ------------------------------------------------------------------

def run_stages(specs: Sequence[StageSpec], x, timings: dict[str, list[float]] | None = None):
    """Push one item through a chain, recording per-stage wall time in ms."""
    frame_id = getattr(x, "frame_id", getattr(x, "source_frame_id", -1))
    for spec in specs:
        t0 = time.perf_counter()
        try:
            x = spec.executor.process(x)
        except Exception as exc:
            raise StageError(spec.name, frame_id, exc) from exc
        if timings is not None:
            timings[spec.name].append((time.perf_counter() - t0) * 1000.0)
    return x


def run_sequential(
    stages: Sequence[Stage | StageSpec],
    source: Iterable[FrameImage],
    n_frames: int,
    sink: Callable[[object], None] | None = None,
    warmup: int = WARMUP_FRAMES,
) -> PipelineReport:
    if n_frames < 1:
        raise InvalidArgument("n_frames must be >= 1")
    specs = as_specs(stages)
    check_chain(specs)
    timings: dict[str, list[float]] = {s.name: [] for s in specs}
    totals: list[float] = []
    ids: list[int] = []
    ends: list[float] = []
    start = time.perf_counter()
    for frame in _take(source, n_frames):
        t0 = time.perf_counter()
        out = run_stages(specs, frame, timings)
        if sink is not None:
            sink(out)
        t1 = time.perf_counter()
        totals.append((t1 - t0) * 1000.0)
        ends.append(t1)
        ids.append(frame.frame_id)
    if not totals:
        raise InvalidArgument("frame source is empty")
    return _sequential_report(timings, totals, ends, start, ids, warmup)


def _sequential_report(timings, totals, ends, start, ids, warmup, mode="sequential") -> PipelineReport:
    skip = warmup if len(totals) > warmup else 0
    t_begin = ends[skip - 1] if skip else start
    duration = ends[-1] - t_begin
    retained = len(totals) - skip
    return PipelineReport(
        stages={name: _stats(v, warmup) for name, v in timings.items() if v},
        end_to_end_mean_ms=float(np.mean(totals[skip:])),
        achieved_fps=retained / duration if duration > 0 else float("inf"),
        frames_displayed=retained,
        dropped_frames=0,
        duration_s=duration,
        mode=mode,
        displayed_ids=list(ids),
    )


def _take(source: Iterable[FrameImage], n: int) -> Iterator[FrameImage]:
    for i, frame in enumerate(source):
        if i >= n:
            return
        yield frame


# -- threaded --------------------------------------------------------------------

class MailboxSlot:
    """Capacity-1 latest-wins hand-off between one producer and one consumer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._seq = -1
        self._fresh = False
        self._closed = False
        self.dropped = 0
        self.puts = 0

    def put(self, item, seq: int) -> None:
        with self._cond:
            if self._fresh:
                self.dropped += 1
            self._item = item
            self._seq = seq
            self._fresh = True
            self.puts += 1
            self._cond.notify()

    def take(self, timeout: float | None = None):
        """Return ``(seq, item)`` for the newest unconsumed item, or None on timeout/close."""
        with self._cond:
            if not self._fresh and not self._closed:
                self._cond.wait(timeout)
            if not self._fresh:
                return None
            self._fresh = False
            item, self._item = self._item, None
            return self._seq, item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def has_item(self) -> bool:
        return self._fresh


def _null_sink(_):
    return None


def run_threaded(
    capture: Iterable[FrameImage],
    infer: Sequence[Stage | StageSpec],
    display: Callable[[object], None] | None,
    duration_s: float,
    capture_stages: Sequence[Stage | StageSpec] = (),
    display_stages: Sequence[Stage | StageSpec] = (),
    capture_fps: float | None = None,
    warmup: int = WARMUP_FRAMES,
) -> PipelineReport:
    """Run capture, inference and display on three threads for ``duration_s`` seconds.

    ``capture_stages`` run on the capture thread (e.g. preprocess and encode),
    ``display_stages`` on the display thread before ``display`` is called.
    The run ends early if a finite source is exhausted and the pipeline drains.
    """
    if duration_s <= 0:
        raise InvalidArgument("duration_s must be > 0")
    cap_specs = as_specs(capture_stages)
    inf_specs = as_specs(infer)
    dis_specs = as_specs(display_stages)
    as_specs([*cap_specs, *inf_specs, *dis_specs])
    check_chain([*cap_specs, *inf_specs, *dis_specs])
    sink = display or _null_sink

    inbox, outbox = MailboxSlot(), MailboxSlot()
    stop = threading.Event()
    capture_done = threading.Event()
    infer_done = threading.Event()
    errors: list[WorkerError] = []
    cap_t = {s.name: [] for s in cap_specs}
    inf_t = {s.name: [] for s in inf_specs}
    dis_t = {s.name: [] for s in dis_specs}
    shown_ids: list[int] = []
    shown_at: list[float] = []
    latencies: list[float] = []
    captured = [0]

    def guarded(name, fn, done: threading.Event | None):
        def body():
            try:
                fn()
            except BaseException as exc:
                errors.append(WorkerError(name, exc))
                stop.set()
            finally:
                if done is not None:
                    done.set()
        return body

    def capture_loop():
        period = 1.0 / capture_fps if capture_fps else 0.0
        next_tick = time.perf_counter()
        frames = iter(capture)
        while not stop.is_set():
            try:
                frame = next(frames)
            except StopIteration:
                return
            frame.capture_timestamp = time.monotonic_ns()
            item = run_stages(cap_specs, frame, cap_t)
            inbox.put((frame.frame_id, frame.capture_timestamp, item), frame.frame_id)
            captured[0] += 1
            if period:
                next_tick += period
                delay = next_tick - time.perf_counter()
                if delay > 0:
                    stop.wait(delay)
                else:
                    next_tick = time.perf_counter()

    def infer_loop():
        while not stop.is_set():
            got = inbox.take(timeout=0.02)
            if got is None:
                if capture_done.is_set() and not inbox.has_item:
                    return
                continue
            seq, (frame_id, ts, item) = got
            out = run_stages(inf_specs, item, inf_t)
            outbox.put((frame_id, ts, out), seq)

    def display_loop():
        while not stop.is_set():
            got = outbox.take(timeout=0.02)
            if got is None:
                if infer_done.is_set() and not outbox.has_item:
                    return
                continue
            _, (frame_id, ts, item) = got
            out = run_stages(dis_specs, item, dis_t)
            sink(out)
            shown_at.append(time.perf_counter())
            shown_ids.append(frame_id)
            latencies.append((time.monotonic_ns() - ts) / 1e6)

    workers = [
        threading.Thread(target=guarded("capture", capture_loop, capture_done), name="capture", daemon=True),
        threading.Thread(target=guarded("inference", infer_loop, infer_done), name="inference", daemon=True),
    ]
    display_done = threading.Event()
    workers.append(threading.Thread(target=guarded("display", display_loop, display_done), name="display", daemon=True))
    start = time.perf_counter()
    for w in workers:
        w.start()
    display_done.wait(duration_s)
    stop.set()
    end = time.perf_counter()
    inbox.close()
    outbox.close()
    for w in workers:
        w.join()
    if errors:
        raise errors[0]

    skip = warmup if len(shown_at) > warmup else 0
    t_begin = shown_at[skip - 1] if skip else start
    if display_done.is_set() and shown_at:
        end = shown_at[-1]
    window = end - t_begin
    retained = len(shown_at) - skip
    stages = {}
    for table in (cap_t, inf_t, dis_t):
        stages.update({name: _stats(v, warmup) for name, v in table.items() if v})
    log.debug("threaded run: captured=%d displayed=%d", captured[0], len(shown_ids))
    return PipelineReport(
        stages=stages,
        end_to_end_mean_ms=float(np.mean(latencies[skip:])) if latencies[skip:] else float("nan"),
        achieved_fps=retained / window if window > 0 else 0.0,
        frames_displayed=retained,
        dropped_frames=inbox.dropped + outbox.dropped,
        duration_s=window,
        mode="threaded",
        displayed_ids=shown_ids,
        notes={"frames_captured": float(captured[0]), "wall_s": end - start},
    )


def split_for_threads(stages: Sequence[Stage | StageSpec]) -> tuple[list, list, list]:
    """Assign a linear chain to (capture, inference, display) workers.

    Everything before the first denoise stage rides on the capture thread and
    everything after the last one on the display thread; chains without a
    denoise stage run entirely on the inference thread.
    """
    specs = list(stages)
    kinds = [getattr(s.executor if isinstance(s, StageSpec) else s, "kind", "custom") for s in specs]
    idx = [i for i, k in enumerate(kinds) if k == "denoise"]
    if not idx:
        return [], specs, []
    return specs[: idx[0]], specs[idx[0]: idx[-1] + 1], specs[idx[-1] + 1:]


def predict_fps(latencies, mode: str = "sequential") -> float:
    """Throughput model: 1000/sum for one thread, 1000/max for overlapped workers."""
    values = list(latencies.values()) if isinstance(latencies, dict) else list(latencies)
    if not values:
        raise InvalidArgument("no latencies given")
    if any(v is None for v in values):
        raise InvalidArgument("every stage needs a declared latency")
    if any(v <= 0 for v in values):
        raise InvalidArgument("declared latencies must be > 0")
    if mode == "sequential":
        return 1000.0 / sum(values)
    if mode == "threaded":
        return 1000.0 / max(values)
    raise InvalidArgument(f"unknown mode {mode!r}")
