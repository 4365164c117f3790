"""Command-line frontend: run pipelines, benchmarks, index tools and the flow demo.

Configuration is strict JSON. Precedence is flags > config file > defaults.
``STREAMSKIP_SEED`` overrides every seed. Exit codes: 0 ok, 1 usage/config,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import ndimage

from . import bench as benchmod
from .backend import PRESETS, FunctionStage, StubStage, overhead_stage, profile_preset, stub_denoise, stub_encode
from .coherence import EmaState, FeedbackState, NoiseConfig, add_noise, ema_update, feedback_blend
from .core import (
    LATENT_SCALE,
    EmbeddingVector,
    FrameImage,
    InvalidArgument,
    LatentTensor,
    Seed,
    read_frame,
    resize_array,
    sample_bilinear,
    write_ppm,
)
from .engine import run_sequential, run_threaded, split_for_threads
from .flowskip import (
    FlowParams,
    SkipSchedule,
    estimate_flow,
    skip_pipeline,
    theoretical_ms_per_frame,
    warp_bilinear,
)
from .knnlatent import (
    FlatIndex,
    IndexFormatError,
    VectorStore,
    clustered_vectors,
    flat_search,
    flat_search_batch,
    hybrid_synthesize,
    ivfpq_build,
    ivfpq_search,
    latent_knn_search,
    load_index,
    read_vectors,
    recall_at_k,
    save_index,
    search,
    weighted_latent_average,
    write_vectors,
)

log = logging.getLogger("streamskip")

SEED_ENV = "STREAMSKIP_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
PATTERNS = ("gradient", "checker", "bandlimited-noise")
EMBED_SIZE = 16
FRAME_SUFFIXES = (".ppm", ".fram")


class ConfigError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


# -- configuration --------------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PipelineConfig(_Strict):
    mode: Literal["plain", "flowskip", "knn", "hybrid"] = "plain"
    profile: str = "sdturbo-coreml"
    # per-stage latency overrides in ms, keyed by stage kind
    stages: dict[str, float] = {}
    latency_scale: float = Field(1.0, ge=0.0)
    threaded: bool = False
    duration_s: float = Field(5.0, gt=0.0)
    seed: int = 0

    @field_validator("profile")
    @classmethod
    def _known_profile(cls, v):
        if v not in PRESETS:
            raise ValueError(f"unknown preset {v!r}; valid presets: {', '.join(PRESETS)}")
        return v


class CoherenceConfig(_Strict):
    noise_strength: float = Field(0.1, ge=0.0)
    alpha: float = Field(0.3, ge=0.0, le=1.0)
    beta: float = Field(0.4, gt=0.0, le=1.0)


class FlowConfig(_Strict):
    n: int = Field(3, ge=1)
    resolution: Literal["full", "half"] = "half"
    warp_ms: float = Field(0.0, ge=0.0)
    pyramid_levels: int = Field(3, ge=1)
    pyramid_scale: float = Field(0.5, gt=0.0, lt=1.0)
    window_size: int = Field(15, ge=1)
    iterations: int = Field(3, ge=1)
    poly_n: int = Field(5, ge=1)
    poly_sigma: float = Field(1.1, gt=0.0)

    def params(self) -> FlowParams:
        return FlowParams(self.pyramid_levels, self.pyramid_scale, self.window_size,
                          self.iterations, self.poly_n, self.poly_sigma)


class KnnConfig(_Strict):
    variant: Literal["clip", "latent"] = "clip"
    index: Literal["flat", "ivfpq"] = "flat"
    store_size: int = Field(256, ge=1)
    k: int = Field(4, ge=1)
    nlist: int = Field(4, ge=1)
    nprobe: int = Field(2, ge=1)
    temperature: float | None = Field(None, gt=0.0)


class SyntheticConfig(_Strict):
    pattern: Literal["gradient", "checker", "bandlimited-noise"] = "bandlimited-noise"
    motion: tuple[float, float] = (1.0, 0.5)
    count: int = Field(64, ge=0)
    width: int = Field(64, ge=LATENT_SCALE)
    height: int = Field(64, ge=LATENT_SCALE)

    @model_validator(mode="after")
    def _latent_aligned(self):
        if self.width % LATENT_SCALE or self.height % LATENT_SCALE:
            raise ValueError(f"width and height must be multiples of {LATENT_SCALE}")
        return self


class IoConfig(_Strict):
    input_dir: Path | None = None
    synthetic: SyntheticConfig = SyntheticConfig()
    output_dir: Path = Path("out")

    @field_validator("input_dir")
    @classmethod
    def _exists(cls, v):
        if v is not None and not Path(v).is_dir():
            raise ValueError(f"input directory does not exist: {v}")
        return v


class AppConfig(_Strict):
    pipeline: PipelineConfig = PipelineConfig()
    coherence: CoherenceConfig = CoherenceConfig()
    flow: FlowConfig = FlowConfig()
    knn: KnnConfig = KnnConfig()
    io: IoConfig = IoConfig()
    bench: list[benchmod.BenchScenario] = []


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for key in keys[:-1]:
        d = d.setdefault(key, {})
        if not isinstance(d, dict):
            raise ConfigError(f"config key {key!r} must be an object")
    d[keys[-1]] = value


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw, 0)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> AppConfig:
    """Defaults, then the JSON file, then dotted-key ``overrides``; the env seed wins over all."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_path(raw, key, value)
    seed = env_seed()
    if seed is not None:
        _set_path(raw, "pipeline.seed", seed)
    try:
        return AppConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_describe(exc)}") from None


# -- frame sources ------------------------------------------------------------------------------

def _base_pattern(pattern: str, width: int, height: int, seed: int) -> np.ndarray:
    if pattern == "gradient":
        xs = np.linspace(0.0, 1.0, width)[None, :].repeat(height, 0)
        ys = np.linspace(0.0, 1.0, height)[:, None].repeat(width, 1)
        return np.stack([xs, ys, 0.5 * (xs + ys)], axis=2)
    if pattern == "checker":
        cell = 8
        yy, xx = np.mgrid[0:height, 0:width]
        on = ((xx // cell + yy // cell) % 2).astype(np.float64)
        return np.stack([0.2 + 0.6 * on, 0.8 - 0.6 * on, np.full_like(on, 0.5)], axis=2)
    if pattern == "bandlimited-noise":
        noise = np.random.default_rng(seed).standard_normal((height, width, 3))
        smooth = ndimage.gaussian_filter(noise, sigma=(3.0, 3.0, 0.0), mode="wrap")
        lo = smooth.min(axis=(0, 1), keepdims=True)
        hi = smooth.max(axis=(0, 1), keepdims=True)
        return (smooth - lo) / np.where(hi > lo, hi - lo, 1.0)
    raise InvalidArgument(f"unknown pattern {pattern!r}; valid patterns: {', '.join(PATTERNS)}")


def synthetic_frames(
    pattern: str,
    motion: tuple[float, float],
    count: int,
    width: int = 64,
    height: int = 64,
    seed: int = 0,
) -> Iterator[FrameImage]:
    """Frame t is frame 0 translated by t * motion, edges clamped."""
    if pattern not in PATTERNS:
        raise InvalidArgument(f"unknown pattern {pattern!r}; valid patterns: {', '.join(PATTERNS)}")
    if count < 0:
        raise InvalidArgument("count must be >= 0")
    return _translated(_base_pattern(pattern, width, height, seed), motion, count)


def _translated(base: np.ndarray, motion, count: int) -> Iterator[FrameImage]:
    h, w = base.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = float(motion[0]), float(motion[1])
    for t in range(count):
        if t == 0 or (dx == 0 and dy == 0):
            data = base
        else:
            data = sample_bilinear(base, xs - t * dx, ys - t * dy)
        yield FrameImage(np.clip(data, 0.0, 1.0), frame_id=t)


def directory_frames(path: Path) -> list[Path]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not files:
        raise ConfigError(f"no .ppm or .fram frames in {path}")
    return files


def _file_frames(files: list[Path]) -> Iterator[FrameImage]:
    for i, p in enumerate(files):
        yield read_frame(p, frame_id=i)


def frame_source(cfg: AppConfig, seed: int) -> tuple[Iterator[FrameImage], int]:
    if cfg.io.input_dir is not None:
        files = directory_frames(cfg.io.input_dir)
        return _file_frames(files), len(files)
    s = cfg.io.synthetic
    return synthetic_frames(s.pattern, s.motion, s.count, s.width, s.height, seed), s.count


# -- chains -------------------------------------------------------------------------------------

def _stage_latencies(cfg: AppConfig) -> dict[str, float]:
    prof = profile_preset(cfg.pipeline.profile)
    lat = prof.latencies()
    lat["overhead"] = prof.overhead_ms
    lat.update(cfg.pipeline.stages)
    return {k: v * cfg.pipeline.latency_scale for k, v in lat.items()}


def plain_chain(cfg: AppConfig, seed: int) -> list:
    """preprocess, encode, noise, denoise, feedback, decode, ema, postprocess.

    The feedback and EMA stages carry state, so build a fresh chain per run.
    """
    lat = _stage_latencies(cfg)
    coh = cfg.coherence
    noise = NoiseConfig(Seed(seed), coh.noise_strength)
    fb = FeedbackState(alpha=coh.alpha)
    ema = EmaState(beta=coh.beta)
    return [
        StubStage("preprocess", lat["preprocess"], seed),
        StubStage("encode", lat["encode"], seed),
        FunctionStage(lambda x: add_noise(x, noise), "noise", latency_ms=lat.get("noise", 0.0),
                      input_type="latent", output_type="latent"),
        StubStage("denoise", lat["denoise"], seed),
        FunctionStage(lambda x: feedback_blend(x, fb), "feedback", latency_ms=lat.get("feedback", 0.0),
                      input_type="latent", output_type="latent"),
        StubStage("decode", lat["decode"], seed),
        FunctionStage(lambda x: ema_update(ema, x), "ema", latency_ms=lat.get("ema", 0.0),
                      input_type="image", output_type="image"),
        StubStage("postprocess", lat["postprocess"], seed),
    ] + ([overhead_stage(lat["overhead"])] if lat["overhead"] > 0 else [])


def embed_frame(img: FrameImage) -> EmbeddingVector:
    """Stand-in image embedding: 16x16 RGB thumbnail, mean-centred and L2-normalised (768-d)."""
    data = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    v = resize_array(data.astype(np.float64), EMBED_SIZE, EMBED_SIZE).ravel()
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm == 0:
        return EmbeddingVector(v)
    return EmbeddingVector(v / norm)


def _pq_m(dim: int) -> int:
    return next(m for m in (48, 32, 16, 8, 4, 2, 1) if dim % m == 0)


def build_knn_pipeline(
    variant: str = "clip",
    index_kind: str = "flat",
    store_size: int = 256,
    k: int = 4,
    width: int = 64,
    height: int = 64,
    seed: int = 0,
    latencies: dict[str, float] | None = None,
    nlist: int = 4,
    nprobe: int = 2,
    temperature: float | None = None,
) -> tuple[list, dict]:
    """Stage chain for the retrieval modes plus the built store and index.

    The store holds (input, output) pairs generated from synthetic frames:
    the key is the embedding (``clip``, ``hybrid``) or the encoded input latent
    (``latent``); the payload is the stub-denoised output latent.
    """
    if variant not in ("clip", "latent", "hybrid"):
        raise InvalidArgument(f"unknown knn variant {variant!r}")
    if index_kind not in ("flat", "ivfpq"):
        raise InvalidArgument(f"unknown index kind {index_kind!r}")
    lat = dict(latencies or {})
    sd = Seed(seed)
    rng = np.random.default_rng([seed, 7])
    keys, payloads = [], []
    for i in range(store_size):
        motion = tuple(rng.uniform(-2.0, 2.0, size=2))
        frame = next(synthetic_frames("bandlimited-noise", motion, 1, width, height, seed + 1 + i))
        enc = stub_encode(frame)
        keys.append(enc.data.ravel() if variant == "latent" else embed_frame(frame).data)
        payloads.append(stub_denoise(enc, sd).data)
    store = VectorStore(np.stack(keys), payload_latents=np.stack(payloads))
    if index_kind == "flat":
        index = FlatIndex(store)
    else:
        index = ivfpq_build(store, nlist, _pq_m(store.dim), 8, seed)
        index.nprobe = nprobe
    kk = min(k, store.n)

    def retrieve(query) -> LatentTensor:
        if variant == "latent":
            nb = latent_knn_search(store, query, kk) if index_kind == "flat" else search(index, query, kk, nprobe)
        else:
            nb = search(index, query, kk, nprobe)
        out = weighted_latent_average(nb, store, temperature)
        out.source_frame_id = getattr(query, "source_frame_id", 0)
        return out

    denoise = StubStage("denoise", 0.0, sd)

    def synthesize(query: EmbeddingVector) -> LatentTensor:
        return hybrid_synthesize(query, index, store, denoise, sd, k=kk, temperature=temperature, nprobe=nprobe)

    chain: list = [StubStage("preprocess", lat.get("preprocess", 0.0), seed)]
    if variant == "latent":
        chain.append(StubStage("encode", lat.get("encode", 0.0), seed))
        chain.append(FunctionStage(retrieve, "search", latency_ms=lat.get("search", 0.0),
                                   input_type="latent", output_type="latent"))
    else:
        chain.append(FunctionStage(embed_frame, "embed", latency_ms=lat.get("embed", 0.0),
                                   input_type="image", output_type="embedding"))
        if variant == "clip":
            chain.append(FunctionStage(retrieve, "search", latency_ms=lat.get("search", 0.0),
                                       input_type="embedding", output_type="latent"))
        else:
            ms = lat.get("search", 0.0) + lat.get("denoise", 0.0)
            chain.append(FunctionStage(synthesize, "synthesize", latency_ms=ms,
                                       input_type="embedding", output_type="latent"))
    chain.append(StubStage("decode", lat.get("decode", 0.0), seed))
    chain.append(StubStage("postprocess", lat.get("postprocess", 0.0), seed))
    return chain, {"store": store, "index": index}


# -- commands -----------------------------------------------------------------------------------

class _FrameWriter:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.count = 0

    def __call__(self, frame: FrameImage) -> None:
        write_ppm(self.out_dir / f"frame_{self.count:06d}.ppm", frame)
        self.count += 1


def cmd_run(cfg: AppConfig) -> int:
    seed = cfg.pipeline.seed
    source, count = frame_source(cfg, seed)
    if count == 0:
        raise ConfigError("frame stream is empty (count 0)")
    out_dir = Path(cfg.io.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in out_dir.glob("frame_*.ppm"):
        stale.unlink()
    writer = _FrameWriter(out_dir)
    mode = cfg.pipeline.mode

    if mode == "plain":
        chain = plain_chain(cfg, seed)
        if cfg.pipeline.threaded:
            cap, inf, dis = split_for_threads(chain)
            report = run_threaded(source, inf, writer, cfg.pipeline.duration_s,
                                  capture_stages=cap, display_stages=dis)
        else:
            report = run_sequential(chain, source, count, sink=writer)
    elif mode == "flowskip":
        schedule = SkipSchedule(cfg.flow.n, cfg.flow.resolution)
        _, report = skip_pipeline(schedule, plain_chain(cfg, seed), source, cfg.flow.params(),
                                  warp_latency_ms=cfg.flow.warp_ms * cfg.pipeline.latency_scale,
                                  n_frames=count, sink=writer)
    else:
        variant = "hybrid" if mode == "hybrid" else cfg.knn.variant
        s = cfg.io.synthetic
        first = read_frame(directory_frames(cfg.io.input_dir)[0]) if cfg.io.input_dir else None
        width, height = (first.width, first.height) if first else (s.width, s.height)
        chain, _ = build_knn_pipeline(
            variant, cfg.knn.index, cfg.knn.store_size, cfg.knn.k, width, height, seed,
            _stage_latencies(cfg), cfg.knn.nlist, cfg.knn.nprobe, cfg.knn.temperature,
        )
        report = run_sequential(chain, source, count, sink=writer)

    (out_dir / "report.md").write_text(report.to_markdown())
    (out_dir / "report.csv").write_text(report.to_csv())
    print(report.to_markdown(), end="")
    print(f"{writer.count} frames written to {out_dir}")
    return EXIT_OK


def default_scenarios_path():
    return resources.files("streamskip") / "data" / "paper_tables.json"


def load_scenarios(path) -> list[benchmod.BenchScenario]:
    try:
        raw = json.loads(Path(path).read_text() if not hasattr(path, "read_text") else path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(raw, dict):
        extra = set(raw) - {"scenarios"}
        if extra:
            raise ConfigError(f"{path}: unknown key(s) {sorted(extra)}")
        raw = raw.get("scenarios", [])
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: expected a list of scenarios")
    if not raw:
        raise ConfigError(f"{path}: scenario list is empty")
    out = []
    for i, item in enumerate(raw):
        try:
            out.append(benchmod.BenchScenario.model_validate(item))
        except ValidationError as exc:
            raise ConfigError(f"{path}: scenario {i}: {_describe(exc)}") from None
    return out


def cmd_bench(path=None, csv_path: str | Path | None = None, seed: int = 0) -> int:
    scenarios = load_scenarios(path or default_scenarios_path())
    seed = env_seed() if env_seed() is not None else seed
    results = []
    for s in scenarios:
        log.info("running scenario %s", s.name)
        results.append(benchmod.run_scenario(s, seed))
    print(benchmod.emit_table(results, "markdown"), end="")
    if csv_path:
        Path(csv_path).write_text(benchmod.emit_table(results, "csv"))
    return EXIT_OK


def _load_queries(path: str | None, synthetic: int, dim: int, seed: int) -> np.ndarray:
    if path:
        q = read_vectors(path)
        if q.shape[1] != dim:
            raise InvalidArgument(f"query dim {q.shape[1]} does not match index dim {dim}")
        return q
    return clustered_vectors(synthetic, dim=dim, seed=seed, offset=10**9)


def _base_vectors(args, seed: int) -> np.ndarray:
    if args.vectors:
        return read_vectors(args.vectors)
    if args.synthetic:
        return clustered_vectors(args.synthetic, dim=args.dim, seed=seed)
    raise ConfigError("give --vectors FILE or --synthetic N")


def _print_neighbors(i: int, nb) -> None:
    pairs = " ".join(f"{int(a)}:{float(d):.6g}" for a, d in zip(nb.ids, nb.distances))
    print(f"query {i}: {pairs}")


def _median_latency_ms(fn, queries: np.ndarray, reps: int = 3) -> float:
    best = []
    for q in queries:
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(q)
            times.append(time.perf_counter() - t0)
        best.append(min(times))
    return 1000.0 * float(np.median(best))


def cmd_index(args, seed: int) -> int:
    if args.action == "build":
        x = _base_vectors(args, seed)
        index = ivfpq_build(x, args.nlist, args.m, args.nbits, seed, args.train_size)
        save_index(args.out, index)
        print(f"built IVF-PQ index: n={index.ntotal} nlist={index.nlist} m={index.m} -> {args.out}")
        if args.save_vectors:
            write_vectors(args.save_vectors, x)
        return EXIT_OK

    if args.action == "search":
        if bool(args.index) == bool(args.flat):
            raise ConfigError("give exactly one of --index FILE or --flat VECTORS")
        if args.flat:
            idx = FlatIndex(VectorStore(read_vectors(args.flat)))
            queries = _load_queries(args.queries, args.synthetic_queries, idx.store.dim, seed)
            for i, nb in enumerate(flat_search_batch(idx, queries, args.k)):
                _print_neighbors(i, nb)
        else:
            ivf = load_index(args.index)
            queries = _load_queries(args.queries, args.synthetic_queries, ivf.dim, seed)
            for i, q in enumerate(queries):
                _print_neighbors(i, ivfpq_search(ivf, q, args.k, args.nprobe))
        return EXIT_OK

    # eval
    ivf = load_index(args.index)
    x = _base_vectors(args, seed)
    if len(x) != ivf.ntotal or x.shape[1] != ivf.dim:
        raise InvalidArgument(f"oracle vectors ({x.shape}) do not match index (n={ivf.ntotal}, dim={ivf.dim})")
    queries = _load_queries(args.queries, args.synthetic_queries, ivf.dim, seed)
    exact = flat_search_batch(FlatIndex(VectorStore(x)), queries, args.k)
    print(f"| nprobe | recall@{args.k} | latency ms |")
    print("|---|---|---|")
    for p in sorted({min(p, ivf.nlist) for p in args.nprobe_list}):
        approx = [ivfpq_search(ivf, q, args.k, p) for q in queries]
        ms = _median_latency_ms(lambda q: ivfpq_search(ivf, q, args.k, p), queries[: args.latency_queries])
        print(f"| {p} | {recall_at_k(approx, exact, args.k):.4f} | {ms:.3f} |")
    if args.trend:
        _print_trend(args, seed)
    return EXIT_OK


def _print_trend(args, seed: int) -> None:
    """Search latency versus n, with nlist grown in proportion so list lengths stay fixed."""
    sizes = [int(s) for s in args.trend.split(",")]
    queries = clustered_vectors(args.latency_queries, dim=args.dim, seed=seed, offset=10**9)
    per_list = max(1, sizes[0] // args.nlist)
    print()
    print("| n | nlist | flat ms | ivfpq ms |")
    print("|---|---|---|---|")
    for n in sizes:
        x = clustered_vectors(n, dim=args.dim, seed=seed)
        nlist = max(1, n // per_list)
        ivf = ivfpq_build(x, nlist, args.m, args.nbits, seed, args.train_size)
        flat = FlatIndex(VectorStore(x))
        f_ms = _median_latency_ms(lambda q: flat_search(flat, q, args.k), queries, reps=1)
        p = min(args.nprobe, nlist)
        i_ms = _median_latency_ms(lambda q: ivfpq_search(ivf, q, args.k, p), queries)
        print(f"| {n} | {nlist} | {f_ms:.3f} | {i_ms:.3f} |")


def _interior_mean(flow, margin: float = 0.15) -> tuple[float, float]:
    h, w = flow.dx.shape
    my, mx = int(h * margin), int(w * margin)
    return float(flow.dx[my:h - my, mx:w - mx].mean()), float(flow.dy[my:h - my, mx:w - mx].mean())


def cmd_flow(args, seed: int) -> int:
    if args.table:
        print("| N | ms/frame | FPS |")
        print("|---|---|---|")
        for n in range(1, 6):
            ms = theoretical_ms_per_frame(args.unet_ms, args.warp_ms, n)
            print(f"| {n} | {ms:.2f} | {1000.0 / ms:.1f} |")
        return EXIT_OK
    if bool(args.prev) != bool(args.next):
        raise ConfigError("give both --prev and --next, or neither for a synthetic pair")
    if args.prev:
        prev, nxt = read_frame(args.prev, 0), read_frame(args.next, 1)
    else:
        prev, nxt = synthetic_frames(args.pattern, tuple(args.shift), 2, args.size, args.size, seed)
    params = FlowParams(pyramid_levels=args.levels)
    flow = estimate_flow(prev, nxt, params, args.resolution)
    dx, dy = _interior_mean(flow)
    print(f"mean flow: dx={dx:.3f} dy={dy:.3f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "warped.ppm", warp_bilinear(prev, flow))
    mag = np.hypot(flow.dx, flow.dy)
    peak = float(mag.max())
    write_ppm(out / "flow_mag.ppm", FrameImage(mag / peak if peak > 0 else mag))
    print(f"wrote {out / 'warped.ppm'} and {out / 'flow_mag.ppm'}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------------

RUN_FLAGS = {
    "mode": "pipeline.mode",
    "profile": "pipeline.profile",
    "latency_scale": "pipeline.latency_scale",
    "threaded": "pipeline.threaded",
    "duration": "pipeline.duration_s",
    "seed": "pipeline.seed",
    "noise_strength": "coherence.noise_strength",
    "alpha": "coherence.alpha",
    "beta": "coherence.beta",
    "n": "flow.n",
    "resolution": "flow.resolution",
    "warp_ms": "flow.warp_ms",
    "variant": "knn.variant",
    "index": "knn.index",
    "store_size": "knn.store_size",
    "k": "knn.k",
    "nlist": "knn.nlist",
    "nprobe": "knn.nprobe",
    "input_dir": "io.input_dir",
    "output_dir": "io.output_dir",
    "pattern": "io.synthetic.pattern",
    "motion": "io.synthetic.motion",
    "frames": "io.synthetic.count",
    "width": "io.synthetic.width",
    "height": "io.synthetic.height",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streamskip", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="process a frame stream (flags > --config file > defaults)")
    run.add_argument("--config", help="strict JSON config file")
    run.add_argument("--mode", choices=["plain", "flowskip", "knn", "hybrid"])
    run.add_argument("--profile", choices=sorted(PRESETS))
    run.add_argument("--latency-scale", type=float)
    run.add_argument("--threaded", action="store_true", default=None)
    run.add_argument("--duration", type=float, help="threaded run length in seconds")
    run.add_argument("--seed", type=int)
    run.add_argument("--noise-strength", type=float)
    run.add_argument("--alpha", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--n", type=int, help="run the full chain every N frames (flowskip)")
    run.add_argument("--resolution", choices=["full", "half"])
    run.add_argument("--warp-ms", type=float)
    run.add_argument("--variant", choices=["clip", "latent"])
    run.add_argument("--index", choices=["flat", "ivfpq"])
    run.add_argument("--store-size", type=int)
    run.add_argument("--k", type=int)
    run.add_argument("--nlist", type=int)
    run.add_argument("--nprobe", type=int)
    run.add_argument("--input-dir")
    run.add_argument("--output-dir")
    run.add_argument("--pattern", choices=PATTERNS)
    run.add_argument("--motion", type=float, nargs=2, metavar=("DX", "DY"))
    run.add_argument("--frames", type=int)
    run.add_argument("--width", type=int)
    run.add_argument("--height", type=int)

    b = sub.add_parser("bench", help="run benchmark scenarios (default: bundled paper_tables.json)")
    b.add_argument("file", nargs="?")
    b.add_argument("--csv", help="also write the results as CSV")
    b.add_argument("--seed", type=int, default=0)

    idx = sub.add_parser("index", help="build, search or evaluate an IVF-PQ index")
    isub = idx.add_subparsers(dest="action", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--k", type=int, default=10)
    common.add_argument("--nprobe", type=int, default=8)
    common.add_argument("--dim", type=int, default=768)
    common.add_argument("--nlist", type=int, default=256)
    common.add_argument("--m", type=int, default=48)
    common.add_argument("--nbits", type=int, default=8)
    common.add_argument("--train-size", type=int)
    common.add_argument("--vectors", help="u32-dim-header f32 vector file")
    common.add_argument("--synthetic", type=int, help="use N synthetic clustered vectors")
    common.add_argument("--queries", help="query vector file")
    common.add_argument("--synthetic-queries", type=int, default=100)
    build = isub.add_parser("build", parents=[common])
    build.add_argument("--out", required=True)
    build.add_argument("--save-vectors", help="also write the base vectors")
    srch = isub.add_parser("search", parents=[common])
    srch.add_argument("--index")
    srch.add_argument("--flat", help="exact search over this vector file")
    ev = isub.add_parser("eval", parents=[common])
    ev.add_argument("--index", required=True)
    ev.add_argument("--nprobe-list", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    ev.add_argument("--latency-queries", type=int, default=20)
    ev.add_argument("--trend", help="comma-separated sizes for a latency-vs-n table")

    fl = sub.add_parser("flow", help="optical-flow tools")
    fsub = fl.add_subparsers(dest="action", required=True, parser_class=_Parser)
    demo = fsub.add_parser("demo", help="estimate flow between two frames and warp")
    demo.add_argument("--prev")
    demo.add_argument("--next")
    demo.add_argument("--pattern", choices=PATTERNS, default="bandlimited-noise")
    demo.add_argument("--shift", type=float, nargs=2, default=[4.0, 2.0], metavar=("DX", "DY"))
    demo.add_argument("--size", type=int, default=256)
    demo.add_argument("--resolution", choices=["full", "half"], default="full")
    demo.add_argument("--levels", type=int, default=3)
    demo.add_argument("--out", default="flow_out")
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--table", action="store_true", help="print the theoretical skip table and exit")
    demo.add_argument("--unet-ms", type=float, default=51.7)
    demo.add_argument("--warp-ms", type=float, default=6.6)
    return p


def _dispatch(args) -> int:
    if args.command == "run":
        overrides = {path: getattr(args, flag) for flag, path in RUN_FLAGS.items()}
        if args.motion is not None:
            overrides["io.synthetic.motion"] = list(args.motion)
        return cmd_run(load_config(args.config, overrides))
    seed = env_seed()
    seed = args.seed if seed is None else seed
    if args.command == "bench":
        return cmd_bench(args.file, args.csv, seed)
    if args.command == "index":
        return cmd_index(args, seed)
    return cmd_flow(args, seed)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"streamskip: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"streamskip: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IndexFormatError as exc:
        print(f"streamskip: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except InvalidArgument as exc:
        print(f"streamskip: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"streamskip: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
