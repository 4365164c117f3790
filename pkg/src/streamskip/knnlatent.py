"""Nearest-neighbour retrieval over stored (input, output) pairs and latent synthesis.

Exact search is a flat L2 scan; approximate search is an inverted file over a
k-means coarse quantizer with product-quantized residuals, scanned with
asymmetric distance tables. All distances are squared Euclidean.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import EmbeddingVector, InvalidArgument, LatentTensor, Seed

log = logging.getLogger(__name__)

INDEX_MAGIC = b"IVPQ"
INDEX_VERSION = 1
# k-means++ seeding runs on at most this many points per centroid
INIT_POOL_FACTOR = 8
# PQ codebooks train on at most this many residuals per centroid
PQ_TRAIN_FACTOR = 64


class IndexFormatError(ValueError):
    pass


def _seed_value(seed) -> int:
    return seed.value if isinstance(seed, Seed) else int(seed)


def _as_query(query) -> np.ndarray:
    if isinstance(query, EmbeddingVector):
        return query.data
    if isinstance(query, LatentTensor):
        return query.data.ravel()
    return np.asarray(query, dtype=np.float32).ravel()


@dataclass
class VectorStore:
    vectors: np.ndarray
    payload_latents: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        vecs = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2:
            raise InvalidArgument("vectors must be an n x dim array")
        if not np.all(np.isfinite(vecs)):
            raise InvalidArgument("vectors contain non-finite values")
        if self.normalized:
            norms = np.linalg.norm(vecs.astype(np.float64), axis=1, keepdims=True)
            vecs = (vecs / np.where(norms > 0, norms, 1.0)).astype(np.float32)
        if self.payload_latents is not None:
            self.payload_latents = np.asarray(self.payload_latents, dtype=np.float64)
            if len(self.payload_latents) != len(vecs):
                raise InvalidArgument("payload count must equal vector count")
        self.vectors = vecs

    @classmethod
    def from_latents(cls, latents) -> "VectorStore":
        """Store whose search keys are the flattened latents themselves."""
        arr = np.stack([l.data if isinstance(l, LatentTensor) else np.asarray(l) for l in latents])
        return cls(arr.reshape(len(arr), -1), payload_latents=arr)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def latent(self, i: int) -> LatentTensor:
        if self.payload_latents is None:
            raise InvalidArgument("store has no payload latents")
        return LatentTensor(self.payload_latents[i])


@dataclass
class NeighborSet:
    ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.ids)


def _topk(dists: np.ndarray, ids: np.ndarray, k: int) -> NeighborSet:
    """k smallest distances, ties broken toward the smaller id."""
    k = min(k, len(dists))
    if k < len(dists):
        kth = np.partition(dists, k - 1)[k - 1]
        keep = dists <= kth
        dists, ids = dists[keep], ids[keep]
    order = np.lexsort((ids, dists))[:k]
    return NeighborSet(ids[order].astype(np.int64), dists[order].astype(np.float64))


# -- exact search ---------------------------------------------------------------------

class FlatIndex:
    metric = "L2"

    def __init__(self, store: VectorStore):
        self.store = store
        v64 = store.vectors.astype(np.float64)
        self._norms = np.einsum("ij,ij->i", v64, v64)
        self._norms32 = self._norms.astype(np.float32)
        self._max_norm = float(self._norms.max()) if len(self._norms) else 0.0

    @property
    def dim(self) -> int:
        return self.store.dim

    @property
    def n(self) -> int:
        return self.store.n

    def distances(self, queries: np.ndarray, chunk: int = 32768) -> np.ndarray:
        """n x nq squared distances, float64 (exact up to rounding)."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        out = np.empty((self.n, len(q)))
        qn = np.einsum("ij,ij->i", q, q)
        for s in range(0, self.n, chunk):
            block = self.store.vectors[s:s + chunk].astype(np.float64)
            out[s:s + chunk] = self._norms[s:s + chunk, None] - 2.0 * (block @ q.T) + qn[None, :]
        return np.maximum(out, 0.0)

    def search(self, queries: np.ndarray, k: int) -> list[NeighborSet]:
        """Float32 scan, then exact float64 re-ranking of every candidate within
        the float32 error bound of the k-th distance."""
        q32 = np.atleast_2d(np.asarray(queries, dtype=np.float32))
        approx = self._norms32[:, None] - 2.0 * (self.store.vectors @ q32.T)
        results = []
        ids = np.arange(self.n)
        for j, q in enumerate(q32):
            q64 = q.astype(np.float64)
            col = approx[:, j]
            kth = np.partition(col, k - 1)[k - 1]
            tol = 1e-4 * (self._max_norm + float(q64 @ q64)) + 1e-6
            cand = np.flatnonzero(col <= kth + 2.0 * tol)
            diff = self.store.vectors[cand].astype(np.float64) - q64
            exact = np.einsum("ij,ij->i", diff, diff)
            results.append(_topk(exact, ids[cand], k))
        return results


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise InvalidArgument(f"k must lie in [1, {n}], got {k}")


def flat_search(index: FlatIndex, query, k: int) -> NeighborSet:
    return flat_search_batch(index, np.atleast_2d(_as_query(query)), k)[0]


def flat_search_batch(index: FlatIndex, queries: np.ndarray, k: int) -> list[NeighborSet]:
    queries = np.atleast_2d(queries)
    if queries.shape[1] != index.dim:
        raise InvalidArgument(f"query dim {queries.shape[1]} does not match index dim {index.dim}")
    _check_k(k, index.n)
    return index.search(queries, k)


def latent_knn_search(store: VectorStore, query_latent: LatentTensor, k: int) -> NeighborSet:
    q = query_latent.data.ravel()
    if q.size != store.dim:
        raise InvalidArgument(f"latent has {q.size} values, store dim is {store.dim}")
    return flat_search(FlatIndex(store), q, k)


# -- k-means -----------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, x_norms: np.ndarray, c: np.ndarray) -> np.ndarray:
    c_norms = np.einsum("ij,ij->i", c, c).astype(np.float64)
    d = x_norms[:, None] - 2.0 * (x @ c.T).astype(np.float64) + c_norms[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, x_norms: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = np.zeros(n, dtype=bool)
    first = int(rng.integers(n))
    idx = [first]
    chosen[first] = True
    closest = _sq_dists(x, x_norms, x[first:first + 1])[:, 0]
    closest[first] = 0.0
    for _ in range(1, k):
        weights = np.where(chosen, 0.0, closest)
        total = weights.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(weights), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
            if chosen[pick]:
                pick = int(rng.choice(np.flatnonzero(~chosen)))
        else:
            pick = int(rng.choice(np.flatnonzero(~chosen)))
        idx.append(pick)
        chosen[pick] = True
        closest = np.minimum(closest, _sq_dists(x, x_norms, x[pick:pick + 1])[:, 0])
        closest[pick] = 0.0
    return x[idx].copy()


def assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 32768) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and squared distances (float32 arithmetic)."""
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x))
    c = np.ascontiguousarray(centroids, dtype=np.float32)
    half_cn = 0.5 * np.einsum("ij,ij->i", c, c)
    for s in range(0, len(x), chunk):
        block = x[s:s + chunk]
        # argmin of |c|^2/2 - x.c equals argmin of |x - c|^2
        score = block @ c.T
        np.subtract(half_cn[None, :], score, out=score)
        lab = score.argmin(axis=1)
        labels[s:s + chunk] = lab
        best = score[np.arange(len(block)), lab].astype(np.float64)
        xn = np.einsum("ij,ij->i", block, block).astype(np.float64)
        dists[s:s + chunk] = np.maximum(xn + 2.0 * best, 0.0)
    return labels, dists


def kmeans(vectors: np.ndarray, k: int, iters: int = 20, seed: Seed | int = 0) -> tuple[np.ndarray, list[float]]:
    """k-means++ seeding then Lloyd iterations. Returns centroids and per-assignment inertia."""
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    n = len(x)
    if k < 1 or k > n:
        raise InvalidArgument(f"k must lie in [1, n={n}], got {k}")
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    rng = np.random.default_rng(_seed_value(seed))
    pool = x
    if n > INIT_POOL_FACTOR * k:
        pool = x[np.sort(rng.choice(n, INIT_POOL_FACTOR * k, replace=False))]
    centroids = _kmeanspp(pool, np.einsum("ij,ij->i", pool, pool).astype(np.float64), k, rng)
    labels, _ = assign(x, centroids)
    history = [_inertia(x, centroids, labels)]
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, x.shape[1]))
        _scatter_sum(sums, labels, x)
        nonempty = counts > 0
        centroids = centroids.copy()
        centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        new_labels, _ = assign(x, centroids)
        history.append(_inertia(x, centroids, new_labels))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids, history


def _inertia(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray, chunk: int = 32768) -> float:
    """Exact (float64) sum of squared distances to the assigned centroids."""
    total = 0.0
    for s in range(0, len(x), chunk):
        diff = x[s:s + chunk].astype(np.float64) - centroids[labels[s:s + chunk]]
        total += float(np.einsum("ij,ij->", diff, diff))
    return total


def _scatter_sum(sums: np.ndarray, labels: np.ndarray, x: np.ndarray) -> None:
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    starts = np.flatnonzero(np.r_[True, sorted_labels[1:] != sorted_labels[:-1]])
    block = np.add.reduceat(x[order], starts, axis=0, dtype=np.float64)
    sums[sorted_labels[starts]] = block


def kmeans_train(vectors: np.ndarray, k: int, iters: int = 20, seed: Seed | int = 0) -> np.ndarray:
    return kmeans(vectors, k, iters, seed)[0]


# -- product quantization ----------------------------------------------------------------

def pq_train(vectors: np.ndarray, m: int, nbits: int = 8, seed: Seed | int = 0, iters: int = 20) -> np.ndarray:
    """Per-subspace codebooks, shape (m, 2**nbits, dim // m)."""
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    n, dim = x.shape
    if m < 1 or dim % m:
        raise InvalidArgument(f"m must divide dim ({m} does not divide {dim})")
    if not 1 <= nbits <= 8:
        raise InvalidArgument("nbits must lie in [1, 8] (byte codes)")
    ksub = 1 << nbits
    if ksub > n:
        raise InvalidArgument(f"need at least {ksub} training vectors, got {n}")
    dsub = dim // m
    base = _seed_value(seed)
    books = np.empty((m, ksub, dsub), dtype=np.float32)
    for j in range(m):
        books[j] = kmeans_train(x[:, j * dsub:(j + 1) * dsub], ksub, iters, base + j)
    return books


def pq_encode(codebooks: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    m, _, dsub = codebooks.shape
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    codes = np.empty((len(x), m), dtype=np.uint8)
    for j in range(m):
        codes[:, j] = assign(np.ascontiguousarray(x[:, j * dsub:(j + 1) * dsub]), codebooks[j])[0]
    return codes


def pq_decode(codebooks: np.ndarray, codes: np.ndarray) -> np.ndarray:
    m = codebooks.shape[0]
    parts = [codebooks[j][codes[:, j]] for j in range(m)]
    return np.concatenate(parts, axis=1)


# -- IVF-PQ --------------------------------------------------------------------------------

@dataclass
class IvfPqIndex:
    centroids: np.ndarray
    codebooks: np.ndarray
    nbits: int = 8
    nprobe: int = 8
    list_ids: list[np.ndarray] = field(default_factory=list)
    list_codes: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.list_ids:
            self.list_ids = [np.empty(0, dtype=np.int64) for _ in range(self.nlist)]
            self.list_codes = [np.empty((0, self.m), dtype=np.uint8) for _ in range(self.nlist)]
        self._offsets = (np.arange(self.m) * self.ksub).astype(np.intp)
        self._books_t = np.ascontiguousarray(self.codebooks.transpose(0, 2, 1))
        self._book_norms = np.einsum("mkd,mkd->mk", self.codebooks, self.codebooks)

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def m(self) -> int:
        return self.codebooks.shape[0]

    @property
    def ksub(self) -> int:
        return self.codebooks.shape[1]

    @property
    def ntotal(self) -> int:
        return sum(len(ids) for ids in self.list_ids)

    def encode(self, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.ascontiguousarray(vectors, dtype=np.float32)
        lists, _ = assign(x, self.centroids)
        codes = pq_encode(self.codebooks, x - self.centroids[lists])
        return lists, codes

    def decode(self, lists: np.ndarray, codes: np.ndarray) -> np.ndarray:
        return self.centroids[lists] + pq_decode(self.codebooks, codes)

    def add(self, vectors: np.ndarray, ids: np.ndarray | None = None, chunk: int = 65536) -> None:
        x = np.asarray(vectors, dtype=np.float32)
        if x.shape[1] != self.dim:
            raise InvalidArgument(f"vector dim {x.shape[1]} does not match index dim {self.dim}")
        if ids is None:
            ids = np.arange(self.ntotal, self.ntotal + len(x), dtype=np.int64)
        new_ids: list[list[np.ndarray]] = [[] for _ in range(self.nlist)]
        new_codes: list[list[np.ndarray]] = [[] for _ in range(self.nlist)]
        for s in range(0, len(x), chunk):
            lists, codes = self.encode(x[s:s + chunk])
            order = np.argsort(lists, kind="stable")
            bounds = np.searchsorted(lists[order], np.arange(self.nlist + 1))
            for l in range(self.nlist):
                sel = order[bounds[l]:bounds[l + 1]]
                if len(sel):
                    new_ids[l].append(ids[s + sel])
                    new_codes[l].append(codes[sel])
        for l in range(self.nlist):
            if new_ids[l]:
                self.list_ids[l] = np.concatenate([self.list_ids[l], *new_ids[l]])
                self.list_codes[l] = np.concatenate([self.list_codes[l], *new_codes[l]])


def ivfpq_train(
    vectors: np.ndarray,
    nlist: int,
    m: int,
    nbits: int = 8,
    seed: Seed | int = 0,
    train_size: int | None = None,
    coarse_iters: int = 10,
    pq_iters: int = 20,
) -> IvfPqIndex:
    """Train an empty index: coarse centroids, then PQ codebooks on residuals."""
    x = np.asarray(vectors, dtype=np.float32)
    n, dim = x.shape
    if m < 1 or dim % m:
        raise InvalidArgument(f"m must divide dim ({m} does not divide {dim})")
    ksub = 1 << nbits
    if n < max(nlist, ksub):
        raise InvalidArgument(f"need at least {max(nlist, ksub)} training vectors, got {n}")
    rng = np.random.default_rng(_seed_value(seed))
    coarse_n = min(n, train_size or max(64 * nlist, ksub * 64))
    sample = x[np.sort(rng.choice(n, coarse_n, replace=False))] if coarse_n < n else x
    log.info("training %d coarse centroids on %d vectors", nlist, len(sample))
    centroids = kmeans_train(sample, nlist, coarse_iters, _seed_value(seed))
    pq_n = min(len(sample), PQ_TRAIN_FACTOR * ksub)
    pq_sample = sample[:pq_n]
    lists, _ = assign(pq_sample, centroids)
    log.info("training %d PQ codebooks on %d residuals", m, pq_n)
    books = pq_train(pq_sample - centroids[lists], m, nbits, _seed_value(seed) + 1, pq_iters)
    return IvfPqIndex(centroids, books, nbits)


def ivfpq_build(
    store: VectorStore | np.ndarray,
    nlist: int,
    m: int,
    nbits: int = 8,
    seed: Seed | int = 0,
    train_size: int | None = None,
) -> IvfPqIndex:
    x = store.vectors if isinstance(store, VectorStore) else np.asarray(store, dtype=np.float32)
    index = ivfpq_train(x, nlist, m, nbits, seed, train_size)
    index.add(x)
    return index


def ivfpq_search(index: IvfPqIndex, query, k: int, nprobe: int | None = None) -> NeighborSet:
    nprobe = index.nprobe if nprobe is None else nprobe
    if not 1 <= nprobe <= index.nlist:
        raise InvalidArgument(f"nprobe must lie in [1, nlist={index.nlist}], got {nprobe}")
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    q = _as_query(query).astype(np.float32)
    if q.size != index.dim:
        raise InvalidArgument(f"query dim {q.size} does not match index dim {index.dim}")
    coarse = np.einsum("ij,ij->i", index.centroids, index.centroids) - 2.0 * (index.centroids @ q)
    probe = _topk(coarse.astype(np.float64), np.arange(index.nlist), nprobe).ids
    probe = [l for l in probe if len(index.list_ids[l])]
    if not probe:
        return NeighborSet(np.empty(0, dtype=np.int64), np.empty(0))
    # (m, p, dsub) @ (m, dsub, ksub) -> (p, m, ksub) distance tables
    residuals = (q[None, :] - index.centroids[probe]).reshape(len(probe), index.m, -1).transpose(1, 0, 2)
    cross = np.matmul(residuals, index._books_t)
    rn = np.einsum("mpd,mpd->mp", residuals, residuals)
    tables = (rn[:, :, None] - 2.0 * cross + index._book_norms[:, None, :]).transpose(1, 0, 2)
    dists, ids = [], []
    for t, l in zip(tables, probe):
        flat = t.ravel()
        codes = index.list_codes[l].astype(np.intp) + index._offsets
        dists.append(flat[codes].sum(axis=1))
        ids.append(index.list_ids[l])
    return _topk(np.concatenate(dists).astype(np.float64), np.concatenate(ids), k)


def recall_at_k(approx: list[NeighborSet], exact: list[NeighborSet], k: int) -> float:
    hits = [len(set(a.ids[:k].tolist()) & set(e.ids[:k].tolist())) / k for a, e in zip(approx, exact)]
    return float(np.mean(hits))


# -- persistence ------------------------------------------------------------------------------

def save_index(path: str | Path, index: IvfPqIndex) -> None:
    rec = np.dtype([("id", "<u8"), ("code", "u1", (index.m,))])
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IIIII", INDEX_VERSION, index.nlist, index.m, index.nbits, index.dim))
        fh.write(index.centroids.astype("<f4").tobytes())
        fh.write(index.codebooks.astype("<f4").tobytes())
        for ids, codes in zip(index.list_ids, index.list_codes):
            fh.write(struct.pack("<I", len(ids)))
            pairs = np.empty(len(ids), dtype=rec)
            pairs["id"] = ids
            pairs["code"] = codes
            fh.write(pairs.tobytes())


def load_index(path: str | Path) -> IvfPqIndex:
    buf = Path(path).read_bytes()
    if buf[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {buf[:4]!r}")
    version, nlist, m, nbits, dim = struct.unpack_from("<IIIII", buf, 4)
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {version}")
    ksub = 1 << nbits
    pos = 24
    try:
        centroids = np.frombuffer(buf, "<f4", nlist * dim, pos).reshape(nlist, dim).astype(np.float32)
        pos += 4 * nlist * dim
        books = np.frombuffer(buf, "<f4", m * ksub * (dim // m), pos).reshape(m, ksub, dim // m).astype(np.float32)
        pos += books.nbytes
        rec = np.dtype([("id", "<u8"), ("code", "u1", (m,))])
        ids, codes = [], []
        for _ in range(nlist):
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            pairs = np.frombuffer(buf, rec, count, pos)
            pos += count * rec.itemsize
            ids.append(pairs["id"].astype(np.int64))
            codes.append(np.ascontiguousarray(pairs["code"]))
    except (ValueError, struct.error) as exc:
        raise IndexFormatError(f"{path}: truncated index ({exc})") from exc
    return IvfPqIndex(centroids, books, nbits, list_ids=ids, list_codes=codes)


def write_vectors(path: str | Path, vectors: np.ndarray) -> None:
    x = np.atleast_2d(np.asarray(vectors, dtype="<f4"))
    Path(path).write_bytes(struct.pack("<I", x.shape[1]) + x.tobytes())


def read_vectors(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise InvalidArgument(f"{path}: missing dim header")
    (dim,) = struct.unpack_from("<I", buf, 0)
    body = len(buf) - 4
    if dim == 0 or body % (4 * dim):
        raise InvalidArgument(f"{path}: payload is not a whole number of {dim}-d rows")
    return np.frombuffer(buf, "<f4", offset=4).reshape(-1, dim).astype(np.float32)


# -- synthesis ------------------------------------------------------------------------------

def softmax_weights(distances: np.ndarray, temperature: float | None = None) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    if temperature is None:
        temperature = float(d.mean()) if d.mean() > 0 else 1.0
    if temperature <= 0:
        raise InvalidArgument("temperature must be > 0")
    e = np.exp(-(d - d.min()) / temperature)
    return e / e.sum()


def weighted_latent_average(neighbors: NeighborSet, store: VectorStore, temperature: float | None = None) -> LatentTensor:
    """Softmax(-d / temperature) blend of the neighbours' payload latents.

    ``temperature`` defaults to the mean neighbour distance.
    """
    if len(neighbors) == 0:
        raise InvalidArgument("empty neighbour set")
    if store.payload_latents is None:
        raise InvalidArgument("store has no payload latents")
    w = softmax_weights(neighbors.distances, temperature)
    payloads = store.payload_latents[neighbors.ids]
    if len(w) == 1:
        return LatentTensor(payloads[0].copy())
    out = np.tensordot(w, payloads, axes=1)
    # convex combination; clip away rounding past the payload envelope
    out = np.clip(out, payloads.min(axis=0), payloads.max(axis=0))
    return LatentTensor(out)


def search(index: FlatIndex | IvfPqIndex, query, k: int, nprobe: int | None = None) -> NeighborSet:
    if isinstance(index, IvfPqIndex):
        return ivfpq_search(index, query, k, nprobe)
    return flat_search(index, query, k)


def hybrid_synthesize(
    query,
    index: FlatIndex | IvfPqIndex,
    store: VectorStore,
    denoise: Callable[[LatentTensor, Seed], LatentTensor],
    seed: Seed | int = 0,
    k: int = 4,
    temperature: float | None = None,
    nprobe: int | None = None,
) -> LatentTensor:
    """Retrieve, blend, then refine the blended latent with one denoiser call.

    ``denoise`` is a ``(latent, seed)`` callable or a stage object with
    ``process`` (which then uses its own seed).
    """
    seed = seed if isinstance(seed, Seed) else Seed(seed)
    neighbors = search(index, query, min(k, store.n), nprobe)
    init = weighted_latent_average(neighbors, store, temperature)
    if hasattr(denoise, "process"):
        return denoise.process(init)
    return denoise(init, seed)


# -- synthetic data ------------------------------------------------------------------------------

def clustered_vectors(
    n: int,
    dim: int = 768,
    n_clusters: int = 1024,
    seed: int = 0,
    center_rank: int = 16,
    intrinsic_dim: int = 4,
    spread: float = 0.5,
    noise: float = 0.005,
    offset: int = 0,
) -> np.ndarray:
    """Embedding-like synthetic data: Gaussian clusters whose centers span a
    ``center_rank``-dimensional subspace, each with ``intrinsic_dim``-dimensional
    internal variation plus small isotropic noise.

    The cluster geometry depends on ``seed`` only; point sampling is keyed by
    ``(seed, offset)``. Large sets can therefore be generated in chunks with
    distinct offsets, and held-out queries drawn with a distant ``offset``.
    """
    geo = np.random.default_rng(seed)
    centers = geo.standard_normal((n_clusters, center_rank), dtype=np.float32) @ geo.standard_normal(
        (center_rank, dim), dtype=np.float32
    ) / np.float32(np.sqrt(center_rank))
    basis = geo.standard_normal((intrinsic_dim, dim), dtype=np.float32) / np.float32(np.sqrt(intrinsic_dim))
    rng = np.random.default_rng([seed, offset])
    labels = rng.integers(n_clusters, size=n)
    x = centers[labels] + (rng.standard_normal((n, intrinsic_dim), dtype=np.float32) * spread) @ basis
    x += rng.standard_normal((n, dim), dtype=np.float32) * np.float32(noise)
    return x
