import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pqvae.errors import ConfigurationError, StampMismatchError
from pqvae.product import ProductCodebook
from pqvae.quantizer import Codebook
from pqvae.retrieval import (
    EncodingDatabase,
    adc_distances,
    average_precision,
    build_tables,
    lut_distance,
    mean_average_precision,
    query_topk,
)


def random_pcb(rng, M, K, d):
    return ProductCodebook([Codebook.from_codewords(rng.normal(size=(K, d))) for _ in range(M)])


def direct_sq(pcb, q, x):
    """Oracle: squared distance between the reconstructed full codewords."""
    a, b = pcb.reconstruct(q[None, :])[0], pcb.reconstruct(x[None, :])[0]
    return float(np.sum((a - b) ** 2))


def textbook_ap(ranked_labels, label, total_relevant, R):
    hits, precisions = 0, []
    for i, lab in enumerate(ranked_labels[:R], start=1):
        if lab == label:
            hits += 1
            precisions.append(hits / i)
    if total_relevant == 0:
        return 0.0
    return sum(precisions) / min(R, total_relevant)


class TestTables:
    def test_identical_codewords(self):
        pcb = ProductCodebook([Codebook.from_codewords(np.ones((3, 2)))])
        assert not build_tables(pcb).tables.any()

    def test_three_four_five(self):
        pcb = ProductCodebook([Codebook.from_codewords([[0.0, 0.0], [3.0, 4.0]])])
        np.testing.assert_array_equal(build_tables(pcb).tables[0], [[0.0, 25.0], [25.0, 0.0]])

    def test_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        pcb = random_pcb(rng, 3, 6, 4)
        lt = build_tables(pcb)
        for m, cb in enumerate(pcb.subs):
            for a in range(6):
                for b in range(6):
                    d = sum((cb.codewords[a, j] - cb.codewords[b, j]) ** 2 for j in range(4))
                    assert abs(lt.tables[m, a, b] - d) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_metric_properties(self, seed):
        rng = np.random.default_rng(seed)
        t = build_tables(random_pcb(rng, 2, 5, 3)).tables
        assert np.all(t >= 0)
        np.testing.assert_array_equal(t, np.transpose(t, (0, 2, 1)))
        assert not np.diagonal(t, axis1=1, axis2=2).any()
        r = np.sqrt(t)
        # r[a, c] <= r[a, b] + r[b, c]
        assert np.all(r[:, :, None, :] <= r[:, :, :, None] + r[:, None, :, :] + 1e-12)


class TestLutDistance:
    def test_equal_codes(self):
        rng = np.random.default_rng(0)
        lt = build_tables(random_pcb(rng, 4, 8, 2))
        q = rng.integers(0, 8, 4)
        assert lut_distance(lt, q, q) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
    def test_equals_reconstruction_distance(self, seed, M, N):
        rng = np.random.default_rng(seed)
        K = int(rng.integers(2, 10))
        pcb = random_pcb(rng, M, K, int(rng.integers(1, 4)))
        lt = build_tables(pcb)
        q, x = rng.integers(0, K, M * N), rng.integers(0, K, M * N)
        d = lut_distance(lt, q, x)
        assert d == lut_distance(lt, x, q)
        assert d >= 0
        assert abs(d - direct_sq(pcb, q, x)) < 1e-9

    def test_stamp_mismatch(self):
        lt = build_tables(random_pcb(np.random.default_rng(0), 2, 4, 1))
        with pytest.raises(StampMismatchError):
            lut_distance(lt, [0, 1, 2], [0, 1, 2])
        with pytest.raises(StampMismatchError):
            lut_distance(lt, [0, 4], [0, 1])


def make_db(rng, n, M=2, N=1, K=8, labels=None):
    return EncodingDatabase(np.arange(n), rng.integers(0, K, (n, M * N)), M, N, K, labels)


class TestQueryTopK:
    def test_own_code_ranks_first(self):
        rng = np.random.default_rng(0)
        pcb = random_pcb(rng, 2, 8, 2)
        db = EncodingDatabase(np.arange(20), rng.permutation(64)[:20, None] // [8, 1] % 8, 2, 1, 8)
        top = query_topk(db, build_tables(pcb), db.codes[7], 3)
        assert top[0] == (7, 0.0)

    def test_full_ranking_is_permutation(self):
        rng = np.random.default_rng(1)
        db = make_db(rng, 30)
        top = query_topk(db, build_tables(random_pcb(rng, 2, 8, 2)), db.codes[0], 30)
        assert sorted(i for i, _ in top) == list(range(30))
        assert query_topk(db, build_tables(random_pcb(rng, 2, 8, 2)), db.codes[0], 100).__len__() == 30

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        pcb = random_pcb(rng, 4, 8, 2)
        db = make_db(rng, 200, M=4)
        q = rng.integers(0, 8, 4)
        got = query_topk(db, build_tables(pcb), q, 200)
        brute = sorted((direct_sq(pcb, q, c), int(i)) for i, c in zip(db.item_ids, db.codes))
        assert [i for i, _ in got] == [i for _, i in brute]
        np.testing.assert_allclose([d for _, d in got], [d for d, _ in brute], atol=1e-9)

    def test_ties_broken_by_id(self):
        pcb = random_pcb(np.random.default_rng(3), 1, 4, 1)
        db = EncodingDatabase([9, 3, 5], [[1], [1], [1]], 1, 1, 4)
        assert [i for i, _ in query_topk(db, build_tables(pcb), [1], 3)] == [3, 5, 9]

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        lt = build_tables(random_pcb(rng, 2, 4, 2))
        db = make_db(rng, 50, K=4)
        perm = rng.permutation(50)
        shuffled = EncodingDatabase(db.item_ids[perm], db.codes[perm], 2, 1, 4)
        q = db.codes[5]
        assert query_topk(db, lt, q, 20) == query_topk(shuffled, lt, q, 20)

    def test_empty_database(self):
        lt = build_tables(random_pcb(np.random.default_rng(0), 2, 4, 1))
        db = EncodingDatabase(np.zeros(0), np.zeros((0, 2)), 2, 1, 4)
        assert query_topk(db, lt, [0, 1], 5) == []

    def test_bad_k(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigurationError):
            query_topk(make_db(rng, 3), build_tables(random_pcb(rng, 2, 8, 1)), [0, 0], 0)


class TestAsymmetric:
    def test_matches_direct_distance(self):
        rng = np.random.default_rng(0)
        pcb = random_pcb(rng, 3, 5, 2)
        db = make_db(rng, 40, M=3, N=2, K=5)
        latent = rng.normal(size=12)
        expected = [np.sum((latent - pcb.reconstruct(c[None, :])[0]) ** 2) for c in db.codes]
        np.testing.assert_allclose(adc_distances(pcb, latent, db.codes), expected, atol=1e-12)


class TestMAP:
    def test_all_relevant(self):
        rng = np.random.default_rng(0)
        db = make_db(rng, 20, labels=np.zeros(20))
        lt = build_tables(random_pcb(rng, 2, 8, 2))
        assert mean_average_precision(db, lt, db.codes[:3], [0, 0, 0], 10) == 1.0

    def test_none_relevant(self):
        rng = np.random.default_rng(1)
        db = make_db(rng, 20, labels=np.zeros(20))
        lt = build_tables(random_pcb(rng, 2, 8, 2))
        assert mean_average_precision(db, lt, db.codes[:2], [1, 2], 10) == 0.0

    def test_textbook_oracle(self):
        rng = np.random.default_rng(2)
        pcb = random_pcb(rng, 2, 8, 2)
        labels = rng.integers(0, 3, 50)
        db = make_db(rng, 50, labels=labels)
        lt = build_tables(pcb)
        queries = rng.integers(0, 8, (5, 2))
        qlabels = rng.integers(0, 3, 5)
        R = 15
        aps = []
        for q, lab in zip(queries, qlabels):
            ranked = sorted(range(50), key=lambda i: (direct_sq(pcb, q, db.codes[i]), i))
            aps.append(textbook_ap([labels[i] for i in ranked], lab, int(np.sum(labels == lab)), R))
        assert abs(mean_average_precision(db, lt, queries, qlabels, R) - np.mean(aps)) < 1e-12

    def test_ap_normalisation(self):
        # hits at ranks 1 and 3 of R=4, three relevant items in total
        assert average_precision(np.array([1, 0, 1, 0]), 3, 4) == pytest.approx((1 + 2 / 3) / 3)
        assert average_precision(np.array([1, 1]), 10, 2) == 1.0
        assert average_precision(np.array([0, 0]), 0, 2) == 0.0

    def test_invariances(self):
        rng = np.random.default_rng(3)
        pcb = random_pcb(rng, 3, 16, 2)
        lt = build_tables(pcb)
        codes = rng.permutation(16**3)[:60, None] // [256, 16, 1] % 16  # distinct codes
        labels = rng.integers(0, 4, 60)
        db = EncodingDatabase(np.arange(60), codes, 3, 1, 16, labels)
        queries, qlabels = rng.integers(0, 16, (6, 3)), rng.integers(0, 4, 6)
        base = mean_average_precision(db, lt, queries, qlabels, 20)
        relabeled = EncodingDatabase(rng.permutation(1000)[:60], codes, 3, 1, 16, labels)
        assert mean_average_precision(relabeled, lt, queries, qlabels, 20) == pytest.approx(base, abs=1e-15)
        doubled = mean_average_precision(db, lt, np.tile(queries, (2, 1)), np.tile(qlabels, 2), 20)
        assert doubled == pytest.approx(base, abs=1e-15)

    def test_requires_labels(self):
        rng = np.random.default_rng(4)
        db = make_db(rng, 5)
        with pytest.raises(ConfigurationError):
            mean_average_precision(db, build_tables(random_pcb(rng, 2, 8, 1)), db.codes, np.zeros(5), 3)
