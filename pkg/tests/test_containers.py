import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pqvae import nn
from pqvae.containers import (
    Index,
    Model,
    codes_from_text,
    codes_to_text,
    index_from_bytes,
    index_to_bytes,
    model_from_bytes,
    model_to_bytes,
    pack_codes,
    read_index,
    read_model,
    unpack_codes,
    write_index,
    write_model,
)
from pqvae.errors import ParseError, StampMismatchError
from pqvae.product import ProductCodebook
from pqvae.quantizer import Codebook
from pqvae.retrieval import EncodingDatabase


def sample_model(seed=0, N=1):
    rng = np.random.default_rng(seed)
    enc = nn.init_dense_net([6, 5, N * 4], rng)
    dec = nn.init_dense_net([N * 4, 5, 6], rng)
    subs = []
    for _ in range(2):
        cb = Codebook.from_codewords(rng.normal(size=(8, 2)), 0.97)
        cb.ema_counts[:] = rng.uniform(0, 3, 8)
        cb.ema_sums[:] = rng.normal(size=(8, 2))
        subs.append(cb)
    return Model(enc, dec, ProductCodebook(subs), N)


def models_equal(a, b):
    arrays = lambda m: (
        m.encoder.params() + m.decoder.params()
        + [x for cb in m.codebook.subs for x in (cb.codewords, cb.ema_counts, cb.ema_sums)]
    )
    return (
        a.N == b.N
        and [l.activation for l in a.encoder.layers] == [l.activation for l in b.encoder.layers]
        and [cb.gamma for cb in a.codebook.subs] == [cb.gamma for cb in b.codebook.subs]
        and all(x.tobytes() == y.tobytes() for x, y in zip(arrays(a), arrays(b)))
    )


class TestModelContainer:
    def test_round_trip(self, tmp_path):
        m = sample_model(N=2)
        write_model(tmp_path / "m.pqvae", m)
        back = read_model(tmp_path / "m.pqvae")
        assert models_equal(m, back)
        assert model_to_bytes(back) == model_to_bytes(m)

    def test_header_layout(self):
        buf = model_to_bytes(sample_model())
        assert buf[:8] == b"PQVAE001"
        assert int.from_bytes(buf[8:12], "little") == 1
        assert int.from_bytes(buf[12:16], "little") == 2  # encoder layer count

    def test_bad_magic(self):
        buf = model_to_bytes(sample_model())
        with pytest.raises(ParseError, match="magic"):
            model_from_bytes(b"PQIDX001" + buf[8:])

    def test_truncated(self):
        buf = model_to_bytes(sample_model())
        with pytest.raises(ParseError, match="truncated"):
            model_from_bytes(buf[:-5])
        with pytest.raises(ParseError, match="trailing"):
            model_from_bytes(buf + b"\x00")


def sample_index(seed=0, n=25, K=8, labels=True):
    rng = np.random.default_rng(seed)
    pcb = ProductCodebook([Codebook.from_codewords(rng.normal(size=(K, 2))) for _ in range(3)])
    db = EncodingDatabase(rng.permutation(1000)[:n], rng.integers(0, K, (n, 6)), 3, 2, K,
                          rng.integers(0, 10, n) if labels else None)
    return Index.build(pcb, db)


def index_equal(a, b):
    return (
        a.db.stamp == b.db.stamp
        and a.tables.tables.tobytes() == b.tables.tables.tobytes()
        and a.db.item_ids.tobytes() == b.db.item_ids.tobytes()
        and a.db.codes.tobytes() == b.db.codes.tobytes()
        and (a.db.labels is None) == (b.db.labels is None)
        and (a.db.labels is None or a.db.labels.tobytes() == b.db.labels.tobytes())
    )


class TestIndexContainer:
    @pytest.mark.parametrize("K", [1, 2, 5, 8, 16, 300])
    def test_round_trip(self, tmp_path, K):
        idx = sample_index(K=K, labels=K % 2 == 0)
        write_index(tmp_path / "i.pqidx", idx)
        back = read_index(tmp_path / "i.pqidx")
        assert index_equal(idx, back)
        assert index_to_bytes(back) == index_to_bytes(idx)

    def test_packed_size(self):
        buf = index_to_bytes(sample_index(n=10, K=8, labels=False))
        # magic + stamp + tables + count + ids + packing header + codes + label flag
        assert len(buf) == 8 + 12 + 3 * 64 * 4 + 8 + 80 + 5 + 10 * 3 + 1

    def test_empty_index(self):
        idx = sample_index(n=0)
        assert len(index_from_bytes(index_to_bytes(idx)).db) == 0

    def test_stamp_mismatch(self):
        rng = np.random.default_rng(0)
        pcb = ProductCodebook([Codebook.from_codewords(rng.normal(size=(4, 2)))])
        db = EncodingDatabase([0], [[1, 2]], 2, 1, 4)
        with pytest.raises(StampMismatchError):
            Index.build(pcb, db)

    def test_bad_magic(self):
        with pytest.raises(ParseError, match="magic"):
            index_from_bytes(model_to_bytes(sample_model()))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 70000), st.integers(0, 6), st.integers(1, 9), st.integers(0, 10_000))
    def test_pack_round_trip(self, K, n, P, seed):
        bits = (K - 1).bit_length()
        codes = np.random.default_rng(seed).integers(0, K, (n, P))
        packed, nbytes = pack_codes(codes, bits)
        assert packed.shape == (n, (P * bits + 7) // 8) and nbytes == packed.shape[1]
        np.testing.assert_array_equal(unpack_codes(packed, P, bits), codes)

    def test_lsb_first_layout(self):
        packed, _ = pack_codes(np.array([[1, 2, 3]]), 3)
        # LSB-first bit stream 100 010 110 fills byte 0 as 1,0,0,0,1,0,1,1
        assert packed.tolist() == [[0b11010001, 0b00000000]]


class TestCodesText:
    def test_round_trip(self):
        db = sample_index().db
        back = codes_from_text(codes_to_text(db))
        assert back.stamp == db.stamp
        np.testing.assert_array_equal(back.codes, db.codes)
        np.testing.assert_array_equal(back.labels, db.labels)

    def test_unlabeled(self):
        db = sample_index(labels=False).db
        assert codes_from_text(codes_to_text(db)).labels is None

    def test_malformed(self):
        with pytest.raises(ParseError):
            codes_from_text("item_id,label,codes\n")
        with pytest.raises(ParseError):
            codes_from_text("# pqcodes M=1 N=1 K=4\nitem_id,label,codes\n0,x,1\n")
