"""Binary containers for trained models (PQVAE001) and retrieval indexes (PQIDX001).

All multi-byte values are little-endian. Byte layouts are documented in
``docs/formats.md``. Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, StampMismatchError
from .nn import DenseNet, Layer
from .product import ProductCodebook, bits_per_index
from .quantizer import Codebook
from .retrieval import EncodingDatabase, LookupTables, build_tables

MODEL_MAGIC = b"PQVAE001"
INDEX_MAGIC = b"PQIDX001"
_ACT_CODES = {"linear": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(
                f"{self.what}: truncated at byte offset {len(self.buf)}, "
                f"needed {n} bytes at offset {self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise ParseError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes at offset {self.pos}")


def _check_magic(r: _Reader, magic: bytes) -> None:
    got = r.take(len(magic))
    if got != magic:
        raise ParseError(f"{r.what}: bad magic {got!r}, expected {magic!r}")


def _net_bytes(net: DenseNet) -> bytes:
    parts = [struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_CODES[layer.activation]))
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def _read_net(r: _Reader) -> DenseNet:
    (count,) = r.unpack("I")
    layers = []
    for _ in range(count):
        n_in, n_out, act = r.unpack("IIB")
        if act not in _ACT_NAMES:
            raise ParseError(f"{r.what}: unknown activation code {act} at offset {r.pos - 1}")
        w = r.array("<f8", n_in * n_out).astype(np.float64).reshape(n_out, n_in)
        b = r.array("<f8", n_out).astype(np.float64)
        layers.append(Layer(w, b, _ACT_NAMES[act]))
    return DenseNet(layers)


@dataclass
class Model:
    encoder: DenseNet
    decoder: DenseNet
    codebook: ProductCodebook
    N: int = 1

    @property
    def stamp(self) -> tuple[int, int, int]:
        return (self.codebook.M, self.N, self.codebook.K)


def model_to_bytes(model: Model) -> bytes:
    pcb = model.codebook
    parts = [MODEL_MAGIC, struct.pack("<I", model.N), _net_bytes(model.encoder), _net_bytes(model.decoder)]
    parts.append(struct.pack("<III", pcb.M, pcb.D, pcb.K))
    for cb in pcb.subs:
        parts.append(struct.pack("<IId", cb.K, cb.dim, cb.gamma))
        for arr in (cb.codewords, cb.ema_counts, cb.ema_sums):
            parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes, what: str = "model") -> Model:
    r = _Reader(buf, what)
    _check_magic(r, MODEL_MAGIC)
    (N,) = r.unpack("I")
    encoder = _read_net(r)
    decoder = _read_net(r)
    M, D, K = r.unpack("III")
    subs = []
    for _ in range(M):
        k, d, gamma = r.unpack("IId")
        if k != K or k * M == 0 or d * M != D:
            raise ParseError(f"{what}: sub-codebook header (K={k}, d={d}) inconsistent with M={M}, D={D}, K={K}")
        cw = r.array("<f8", k * d).astype(np.float64).reshape(k, d)
        counts = r.array("<f8", k).astype(np.float64)
        sums = r.array("<f8", k * d).astype(np.float64).reshape(k, d)
        subs.append(Codebook(cw, counts, sums, gamma))
    r.finish()
    return Model(encoder, decoder, ProductCodebook(subs), N)


def write_model(path, model: Model) -> None:
    atomic_write(path, model_to_bytes(model))


def read_model(path) -> Model:
    with open(path, "rb") as f:
        return model_from_bytes(f.read(), str(path))


@dataclass
class Index:
    tables: LookupTables
    db: EncodingDatabase

    @classmethod
    def build(cls, pcb: ProductCodebook, db: EncodingDatabase) -> "Index":
        """Tables are rounded to float32, the precision they are stored at."""
        if (pcb.M, pcb.K) != (db.M, db.K):
            raise StampMismatchError(f"codebook (M={pcb.M}, K={pcb.K}) does not match codes stamp {db.stamp}")
        t = build_tables(pcb).tables.astype(np.float32).astype(np.float64)
        return cls(LookupTables(t), db)


def pack_codes(codes: np.ndarray, bits: int) -> tuple[np.ndarray, int]:
    """Pack each row of indices LSB-first into whole bytes.

    Returns the ``(n, bytes_per_item)`` uint8 array and ``bytes_per_item``.
    """
    codes = np.asarray(codes, dtype=np.int64)
    n, P = codes.shape
    nbytes = (P * bits + 7) // 8
    if nbytes == 0:
        return np.zeros((n, 0), dtype=np.uint8), 0
    bitmat = ((codes[:, :, None] >> np.arange(bits)) & 1).astype(np.uint8).reshape(n, P * bits)
    padded = np.zeros((n, nbytes * 8), dtype=np.uint8)
    padded[:, : P * bits] = bitmat
    return np.packbits(padded, axis=1, bitorder="little"), nbytes


def unpack_codes(packed: np.ndarray, P: int, bits: int) -> np.ndarray:
    n = packed.shape[0]
    if bits == 0:
        return np.zeros((n, P), dtype=np.int64)
    bitmat = np.unpackbits(packed, axis=1, bitorder="little")[:, : P * bits]
    bitmat = bitmat.reshape(n, P, bits).astype(np.int64)
    return (bitmat << np.arange(bits)).sum(axis=2)


def index_to_bytes(index: Index) -> bytes:
    db = index.db
    bits = bits_per_index(db.K)
    packed, nbytes = pack_codes(db.codes, bits)
    parts = [
        INDEX_MAGIC,
        struct.pack("<III", db.M, db.N, db.K),
        index.tables.tables.astype("<f4").tobytes(),
        struct.pack("<Q", len(db)),
        db.item_ids.astype("<i8").tobytes(),
        struct.pack("<BI", bits, nbytes),
        packed.tobytes(),
    ]
    if db.labels is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(db.labels.astype("<i8").tobytes())
    return b"".join(parts)


def index_from_bytes(buf: bytes, what: str = "index") -> Index:
    r = _Reader(buf, what)
    _check_magic(r, INDEX_MAGIC)
    M, N, K = r.unpack("III")
    if M == 0 or N == 0 or K == 0:
        raise ParseError(f"{what}: invalid stamp M={M}, N={N}, K={K}")
    tables = r.array("<f4", M * K * K).astype(np.float64).reshape(M, K, K)
    (count,) = r.unpack("Q")
    ids = r.array("<i8", count).astype(np.int64)
    bits, nbytes = r.unpack("BI")
    if bits != bits_per_index(K) or nbytes != (M * N * bits + 7) // 8:
        raise ParseError(f"{what}: code packing header (bits={bits}, bytes={nbytes}) inconsistent with K={K}")
    packed = r.array("u1", count * nbytes).reshape(count, nbytes)
    codes = unpack_codes(packed, M * N, bits)
    (has_labels,) = r.unpack("B")
    labels = r.array("<i8", count).astype(np.int64) if has_labels else None
    r.finish()
    return Index(LookupTables(tables), EncodingDatabase(ids, codes, M, N, K, labels))


def write_index(path, index: Index) -> None:
    atomic_write(path, index_to_bytes(index))


def read_index(path) -> Index:
    with open(path, "rb") as f:
        return index_from_bytes(f.read(), str(path))


CODES_HEADER = "# pqcodes"


def codes_to_text(db: EncodingDatabase) -> str:
    """Plain-text code listing written by ``pqvae encode``."""
    lines = [f"{CODES_HEADER} M={db.M} N={db.N} K={db.K}", "item_id,label,codes"]
    labels = db.labels if db.labels is not None else [None] * len(db)
    for item, lab, code in zip(db.item_ids, labels, db.codes):
        lab_s = "" if lab is None else str(int(lab))
        lines.append(f"{int(item)},{lab_s}," + " ".join(str(int(c)) for c in code))
    return "\n".join(lines) + "\n"


def codes_from_text(text: str, what: str = "codes") -> EncodingDatabase:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(CODES_HEADER):
        raise ParseError(f"{what}: missing '{CODES_HEADER}' header")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0][len(CODES_HEADER):].split())
        M, N, K = int(fields["M"]), int(fields["N"]), int(fields["K"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{what}: malformed header {lines[0]!r}") from exc
    ids, labels, codes = [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        try:
            item, lab, code = line.split(",")
            ids.append(int(item))
            labels.append(None if lab == "" else int(lab))
            codes.append([int(c) for c in code.split()])
        except ValueError as exc:
            raise ParseError(f"{what}: line {lineno} is malformed: {line!r}") from exc
    has_labels = bool(labels) and all(l is not None for l in labels)
    return EncodingDatabase(
        np.array(ids, dtype=np.int64),
        np.array(codes, dtype=np.int64).reshape(len(ids), M * N),
        M, N, K,
        np.array(labels, dtype=np.int64) if has_labels else None,
    )
