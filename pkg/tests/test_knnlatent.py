import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamskip.backend import stub_denoise
from streamskip.core import InvalidArgument, LatentTensor
from streamskip.knnlatent import (
    FlatIndex,
    IndexFormatError,
    NeighborSet,
    VectorStore,
    clustered_vectors,
    flat_search,
    flat_search_batch,
    hybrid_synthesize,
    ivfpq_build,
    ivfpq_search,
    ivfpq_train,
    kmeans,
    latent_knn_search,
    load_index,
    pq_decode,
    pq_encode,
    pq_train,
    read_vectors,
    recall_at_k,
    save_index,
    weighted_latent_average,
    write_vectors,
)

DATA = Path(__file__).parent / "data"


def brute_force(x, q, k):
    """O(n) per query in float64; ties toward the smaller id."""
    out = []
    x64 = x.astype(np.float64)
    for qi in np.atleast_2d(q).astype(np.float64):
        d = ((x64 - qi) ** 2).sum(axis=1)
        order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
        out.append(np.array(order))
    return out


class TestFlat:
    def test_self_match(self):
        x = np.random.default_rng(0).standard_normal((500, 32)).astype(np.float32)
        nb = flat_search(FlatIndex(VectorStore(x)), x[123], 3)
        assert nb.ids[0] == 123 and nb.distances[0] == 0.0

    def test_k_equals_n(self):
        x = np.random.default_rng(1).standard_normal((40, 8)).astype(np.float32)
        nb = flat_search(FlatIndex(VectorStore(x)), x[0] * 0.5, 40)
        assert sorted(nb.ids.tolist()) == list(range(40))
        assert np.all(np.diff(nb.distances) >= 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3000, 768)).astype(np.float32)
        q = rng.standard_normal((20, 768)).astype(np.float32)
        got = flat_search_batch(FlatIndex(VectorStore(x)), q, 10)
        for nb, ref in zip(got, brute_force(x, q, 10)):
            assert np.array_equal(nb.ids, ref)

    def test_ties_prefer_smaller_id(self):
        x = np.zeros((6, 4), dtype=np.float32)
        x[[1, 3, 4]] = 1.0
        nb = flat_search(FlatIndex(VectorStore(x)), np.ones(4), 3)
        assert nb.ids.tolist() == [1, 3, 4]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(5, 60), st.integers(1, 12), st.integers(0, 2**31))
    def test_property_exact(self, n, dim, seed):
        rng = np.random.default_rng(seed)
        # coarse grid values force many exact ties
        x = rng.integers(-2, 3, (n, dim)).astype(np.float32)
        q = rng.integers(-2, 3, dim).astype(np.float32)
        k = int(rng.integers(1, n + 1))
        assert np.array_equal(flat_search(FlatIndex(VectorStore(x)), q, k).ids, brute_force(x, q, k)[0])

    def test_k_out_of_range(self):
        idx = FlatIndex(VectorStore(np.zeros((3, 2))))
        with pytest.raises(InvalidArgument):
            flat_search(idx, np.zeros(2), 4)
        with pytest.raises(InvalidArgument):
            flat_search(idx, np.zeros(2), 0)

    def test_normalized_store_cosine_order(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((200, 16))
        q = rng.standard_normal(16)
        store = VectorStore(x, normalized=True)
        nb = flat_search(FlatIndex(store), q / np.linalg.norm(q), 5)
        cos = (x / np.linalg.norm(x, axis=1, keepdims=True)) @ (q / np.linalg.norm(q))
        assert nb.ids.tolist() == np.argsort(-cos)[:5].tolist()


class TestLatentSearch:
    def test_self_match(self):
        lats = np.random.default_rng(4).standard_normal((50, 4, 4, 4))
        store = VectorStore.from_latents(lats)
        nb = latent_knn_search(store, LatentTensor(lats[17]), 2)
        assert nb.ids[0] == 17 and nb.distances[0] == 0.0

    def test_brute_force_1000(self):
        rng = np.random.default_rng(5)
        lats = rng.standard_normal((1000, 4, 4, 4)).astype(np.float32)
        store = VectorStore.from_latents(lats)
        for _ in range(5):
            q = rng.standard_normal((4, 4, 4))
            nb = latent_knn_search(store, LatentTensor(q), 7)
            assert np.array_equal(nb.ids, brute_force(store.vectors, q.ravel(), 7)[0])

    def test_k_too_large(self):
        store = VectorStore.from_latents(np.zeros((3, 4, 1, 1)))
        with pytest.raises(InvalidArgument):
            latent_knn_search(store, LatentTensor(np.zeros((4, 1, 1))), 4)


class TestKmeans:
    def test_n_equals_k(self):
        x = np.random.default_rng(6).standard_normal((12, 5)).astype(np.float32)
        c, hist = kmeans(x, 12, 5, seed=0)
        assert hist[-1] == pytest.approx(0.0, abs=1e-6)
        assert sorted(map(tuple, c.tolist())) == sorted(map(tuple, x.tolist()))

    def test_two_blobs(self):
        rng = np.random.default_rng(7)
        a = rng.normal(0.0, 0.3, (400, 3)) + [5, 0, 0]
        b = rng.normal(0.0, 0.3, (400, 3)) - [5, 0, 0]
        c, _ = kmeans(np.vstack([a, b]), 2, 20, seed=1)
        means = [a.mean(axis=0), b.mean(axis=0)]
        for m in means:
            assert min(np.linalg.norm(c - m, axis=1)) < 0.1

    def test_deterministic(self):
        x = np.random.default_rng(8).standard_normal((300, 6))
        assert np.array_equal(kmeans(x, 7, 10, seed=3)[0], kmeans(x, 7, 10, seed=3)[0])

    def test_inertia_non_increasing(self):
        x = clustered_vectors(3000, dim=32, n_clusters=40, seed=2)
        _, hist = kmeans(x, 40, 15, seed=0)
        assert all(b <= a * (1 + 1e-6) for a, b in zip(hist, hist[1:]))

    def test_bad_k(self):
        with pytest.raises(InvalidArgument):
            kmeans(np.zeros((3, 2)), 4)


class TestPQ:
    def test_exact_on_codebook_points(self):
        rng = np.random.default_rng(9)
        m, dsub, ksub = 4, 3, 16
        points = rng.standard_normal((m, ksub, dsub)).astype(np.float32)
        codes = rng.integers(0, ksub, (400, m))
        codes[:ksub] = np.arange(ksub)[:, None]
        x = np.concatenate([points[j][codes[:, j]] for j in range(m)], axis=1)
        books = pq_train(x, m, nbits=4, seed=0)
        rec = pq_decode(books, pq_encode(books, x))
        assert np.max(np.abs(rec - x)) == 0.0

    def test_beats_random_codebook(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2000, 16)).astype(np.float32)
        books = pq_train(x, 4, nbits=6, seed=0)
        err = np.mean((pq_decode(books, pq_encode(books, x)) - x) ** 2)
        rand = x[rng.choice(2000, 64, replace=False)].reshape(64, 4, 4).transpose(1, 0, 2).copy()
        base = np.mean((pq_decode(rand, pq_encode(rand, x)) - x) ** 2)
        assert err < base

    def test_m_must_divide(self):
        with pytest.raises(InvalidArgument, match="m must divide dim"):
            pq_train(np.zeros((300, 768), np.float32), 7)

    def test_deterministic(self):
        x = np.random.default_rng(11).standard_normal((600, 8))
        assert np.array_equal(pq_train(x, 2, 5, seed=4), pq_train(x, 2, 5, seed=4))


@pytest.fixture(scope="module")
def mid_index():
    x = clustered_vectors(8000, dim=64, n_clusters=64, seed=3)
    return x, ivfpq_build(x, nlist=16, m=8, nbits=8, seed=0)


class TestIvfPq:
    def test_nlist_one(self):
        x = np.random.default_rng(12).standard_normal((300, 16)).astype(np.float32)
        idx = ivfpq_build(x, 1, 4, 8, seed=0)
        assert len(idx.list_ids) == 1 and sorted(idx.list_ids[0].tolist()) == list(range(300))

    def test_partition(self, mid_index):
        x, idx = mid_index
        all_ids = np.concatenate(idx.list_ids)
        assert len(all_ids) == len(x) and len(np.unique(all_ids)) == len(x)
        assert all(c.dtype == np.uint8 for c in idx.list_codes)

    def test_heldout_reconstruction(self):
        x = clustered_vectors(6000, dim=64, n_clusters=64, seed=4)
        train, held = x[:5000], x[5000:]
        idx = ivfpq_train(train, 16, 8, 8, seed=0)
        l_tr, c_tr = idx.encode(train)
        l_te, c_te = idx.encode(held)
        train_err = np.mean(np.sum((idx.decode(l_tr, c_tr) - train) ** 2, axis=1))
        held_err = np.mean(np.sum((idx.decode(l_te, c_te) - held) ** 2, axis=1))
        # decode = centroid + decoded residual
        np.testing.assert_allclose(idx.decode(l_te, c_te),
                                   idx.centroids[l_te] + pq_decode(idx.codebooks, c_te), rtol=0, atol=0)
        assert held_err < 1.5 * train_err

    def test_lossless_matches_flat(self):
        rng = np.random.default_rng(13)
        x = rng.integers(0, 4, (64, 8)).astype(np.float32)
        idx = ivfpq_build(x, nlist=1, m=8, nbits=2, seed=0)
        flat = FlatIndex(VectorStore(x))
        for q in rng.integers(0, 4, (10, 8)).astype(np.float32):
            a = ivfpq_search(idx, q, 10, nprobe=1)
            b = flat_search(flat, q, 10)
            assert a.ids.tolist() == b.ids.tolist()
            np.testing.assert_allclose(a.distances, b.distances, atol=1e-5)

    def test_recall_monotone(self, mid_index):
        x, idx = mid_index
        q = clustered_vectors(50, dim=64, n_clusters=64, seed=3, offset=10**9)
        exact = flat_search_batch(FlatIndex(VectorStore(x)), q, 10)
        recalls = [recall_at_k([ivfpq_search(idx, qi, 10, p) for qi in q], exact, 10) for p in (1, 2, 4, 8, 16)]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] > 0.5

    def test_nprobe_zero(self, mid_index):
        with pytest.raises(InvalidArgument):
            ivfpq_search(mid_index[1], mid_index[0][0], 5, nprobe=0)

    def test_deterministic_build(self):
        x = clustered_vectors(1000, dim=16, n_clusters=8, seed=5)
        a, b = ivfpq_build(x, 4, 4, 8, seed=2), ivfpq_build(x, 4, 4, 8, seed=2)
        assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.codebooks, b.codebooks)
        assert all(np.array_equal(p, q) for p, q in zip(a.list_codes, b.list_codes))

    def test_save_load_roundtrip(self, mid_index, tmp_path):
        x, idx = mid_index
        save_index(tmp_path / "i.ivpq", idx)
        back = load_index(tmp_path / "i.ivpq")
        assert (back.nlist, back.m, back.nbits, back.dim) == (16, 8, 8, 64)
        for q in x[:5]:
            a, b = ivfpq_search(idx, q, 5, 4), ivfpq_search(back, q, 5, 4)
            assert np.array_equal(a.ids, b.ids) and np.array_equal(a.distances, b.distances)

    def test_header_layout(self, mid_index, tmp_path):
        save_index(tmp_path / "i.ivpq", mid_index[1])
        raw = (tmp_path / "i.ivpq").read_bytes()
        assert raw[:4] == b"IVPQ"
        assert struct.unpack_from("<IIIII", raw, 4) == (1, 16, 8, 8, 64)

    def test_corrupt_files(self, mid_index, tmp_path):
        p = tmp_path / "i.ivpq"
        save_index(p, mid_index[1])
        raw = bytearray(p.read_bytes())
        bad_version = raw[:4] + struct.pack("<I", 9) + raw[8:]
        (tmp_path / "v.ivpq").write_bytes(bytes(bad_version))
        with pytest.raises(IndexFormatError, match="version"):
            load_index(tmp_path / "v.ivpq")
        (tmp_path / "m.ivpq").write_bytes(b"XXXX" + bytes(raw[4:]))
        with pytest.raises(IndexFormatError, match="magic"):
            load_index(tmp_path / "m.ivpq")
        (tmp_path / "t.ivpq").write_bytes(bytes(raw[:200]))
        with pytest.raises(IndexFormatError):
            load_index(tmp_path / "t.ivpq")


class TestVectorIO:
    def test_roundtrip(self, tmp_path):
        x = np.random.default_rng(14).standard_normal((7, 5)).astype(np.float32)
        write_vectors(tmp_path / "v.f32", x)
        assert np.array_equal(read_vectors(tmp_path / "v.f32"), x)

    def test_bad_payload(self, tmp_path):
        (tmp_path / "v.f32").write_bytes(struct.pack("<I", 3) + bytes(8))
        with pytest.raises(InvalidArgument):
            read_vectors(tmp_path / "v.f32")


def small_store(seed=15, n=30):
    rng = np.random.default_rng(seed)
    return VectorStore(rng.standard_normal((n, 8)), payload_latents=rng.standard_normal((n, 4, 3, 3)))


class TestSynthesis:
    def test_k1_exact(self):
        store = small_store()
        nb = NeighborSet(np.array([4]), np.array([2.5]))
        assert np.array_equal(weighted_latent_average(nb, store).data, store.payload_latents[4])

    def test_equal_distance_mean(self):
        store = small_store()
        nb = NeighborSet(np.array([2, 9]), np.array([1.0, 1.0]))
        out = weighted_latent_average(nb, store).data
        assert np.array_equal(out, (store.payload_latents[2] + store.payload_latents[9]) / 2)

    def test_low_temperature_limit(self):
        store = small_store()
        nb = NeighborSet(np.array([3, 7, 1]), np.array([1.0, 1.5, 2.0]))
        out = weighted_latent_average(nb, store, temperature=0.5 / 20).data
        assert np.max(np.abs(out - store.payload_latents[3])) < 1e-4

    def test_convex_bounds(self):
        rng = np.random.default_rng(16)
        store = small_store(n=50)
        for _ in range(200):
            k = int(rng.integers(1, 8))
            ids = rng.choice(50, k, replace=False)
            nb = NeighborSet(ids, np.sort(rng.uniform(0, 3, k)))
            out = weighted_latent_average(nb, store).data
            p = store.payload_latents[ids]
            assert np.all(out >= p.min(axis=0)) and np.all(out <= p.max(axis=0))

    def test_hybrid_identity_denoise(self):
        store = small_store()
        q = np.random.default_rng(17).standard_normal(8)
        out = hybrid_synthesize(q, FlatIndex(store), store, lambda lat, seed: lat, seed=0, k=3)
        ref = weighted_latent_average(flat_search(FlatIndex(store), q, 3), store)
        assert np.array_equal(out.data, ref.data)

    def test_hybrid_k1_identity(self):
        store = small_store()
        out = hybrid_synthesize(store.vectors[5], FlatIndex(store), store, lambda lat, seed: lat, k=1)
        assert np.array_equal(out.data, store.payload_latents[5])

    def test_hybrid_golden(self):
        rng = np.random.default_rng(11)
        vecs, lats = rng.standard_normal((32, 16)), rng.standard_normal((32, 4, 4, 4))
        store = VectorStore(vecs, payload_latents=lats)
        q = rng.standard_normal(16).astype(np.float32)
        out = hybrid_synthesize(q, FlatIndex(store), store, stub_denoise, seed=5, k=4)
        # composed reference path
        ref = stub_denoise(weighted_latent_average(flat_search(FlatIndex(store), q, 4), store), 5)
        assert np.array_equal(out.data, ref.data)
        np.testing.assert_array_equal(out.data, np.load(DATA / "hybrid_seed5.npy"))
