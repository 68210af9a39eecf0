"""Lookup-table retrieval over product-quantized codes and mAP@R evaluation.

Codes are int arrays of length ``N*M``; position ``p`` belongs to
sub-quantizer ``p % M``. Distances are sums of squared sub-codeword
distances read from per-sub-quantizer ``K x K`` tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, StampMismatchError
from .product import ProductCodebook, split_latent


@dataclass
class LookupTables:
    tables: np.ndarray  # (M, K, K) squared distances

    @property
    def M(self) -> int:
        return self.tables.shape[0]

    @property
    def K(self) -> int:
        return self.tables.shape[1]


def build_tables(pcb: ProductCodebook) -> LookupTables:
    tables = np.empty((pcb.M, pcb.K, pcb.K))
    for m, cb in enumerate(pcb.subs):
        diff = cb.codewords[:, None, :] - cb.codewords[None, :, :]
        tables[m] = np.einsum("abd,abd->ab", diff, diff)
    return LookupTables(tables)


@dataclass
class EncodingDatabase:
    item_ids: np.ndarray  # (n,) int64
    codes: np.ndarray  # (n, N*M) int64
    M: int
    N: int
    K: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64).reshape(-1)
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(len(self.item_ids), self.N * self.M)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.item_ids):
                raise ConfigurationError("labels and item_ids differ in length")
        check_codes(self.codes, self.M, self.N, self.K)

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def stamp(self) -> tuple[int, int, int]:
        return (self.M, self.N, self.K)


def check_codes(codes: np.ndarray, M: int, N: int, K: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[-1] != M * N:
        raise StampMismatchError(f"code length {codes.shape[-1]} does not match M*N = {M * N}")
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise StampMismatchError(f"code entries must lie in [0, {K})")
    return codes


def _check_stamp(lt: LookupTables, db: EncodingDatabase) -> None:
    if (lt.M, lt.K) != (db.M, db.K):
        raise StampMismatchError(f"tables (M={lt.M}, K={lt.K}) do not match database stamp {db.stamp}")


def lut_distance(lt: LookupTables, q: np.ndarray, x: np.ndarray) -> float:
    """Sum over slots and sub-quantizers of ``LT_m[q_p, x_p]``."""
    q = np.asarray(q, dtype=np.int64).reshape(-1)
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if q.shape != x.shape or len(q) % lt.M:
        raise StampMismatchError(f"code lengths {len(q)}, {len(x)} incompatible with M={lt.M}")
    N = len(q) // lt.M
    check_codes(q, lt.M, N, lt.K)
    check_codes(x, lt.M, N, lt.K)
    pos = np.arange(len(q))
    return float(lt.tables[pos % lt.M, q, x].sum())


def lut_distances(lt: LookupTables, codes: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Distances from one query code to every row of ``codes``."""
    codes = np.asarray(codes, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64).reshape(-1)
    if codes.shape[1] != len(q) or len(q) % lt.M:
        raise StampMismatchError("query code does not match database code length")
    out = np.zeros(codes.shape[0])
    for p in range(len(q)):
        out += lt.tables[p % lt.M, q[p]][codes[:, p]]
    return out


def adc_distances(pcb: ProductCodebook, latent: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Asymmetric distances: a raw query latent (``N*D`` values) against codes."""
    latent = np.asarray(latent, dtype=np.float64).reshape(-1, pcb.D)  # (N, D)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[1] != latent.shape[0] * pcb.M:
        raise StampMismatchError("query latent does not match database code length")
    out = np.zeros(codes.shape[0])
    for n, row in enumerate(latent):
        for m, (cb, chunk) in enumerate(zip(pcb.subs, split_latent(row[None, :], pcb.M))):
            table = np.sum((cb.codewords - chunk) ** 2, axis=1)  # (K,)
            out += table[codes[:, n * pcb.M + m]]
    return out


def rank(ids: np.ndarray, dist: np.ndarray, k: int | None = None) -> np.ndarray:
    """Order positions by ascending distance, ties by ascending item id."""
    order = np.lexsort((ids, dist))
    return order if k is None else order[:k]


def query_topk(db: EncodingDatabase, lt: LookupTables, q: np.ndarray, k: int) -> list[tuple[int, float]]:
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if len(db) == 0:
        return []
    _check_stamp(lt, db)
    q = check_codes(np.asarray(q).reshape(-1), db.M, db.N, db.K)
    dist = lut_distances(lt, db.codes, q)
    top = rank(db.item_ids, dist, k)
    return [(int(db.item_ids[i]), float(dist[i])) for i in top]


def average_precision(relevant_ranked: np.ndarray, total_relevant: int, R: int) -> float:
    """AP within the top ``R``, normalised by ``min(R, total_relevant)``."""
    if total_relevant == 0:
        return 0.0
    hits = np.asarray(relevant_ranked[:R], dtype=bool)
    if not hits.any():
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / min(R, total_relevant))


def mean_average_precision(
    db: EncodingDatabase,
    lt: LookupTables,
    query_codes: np.ndarray,
    query_labels: np.ndarray,
    R: int,
) -> float:
    """mAP@R with symmetric (code-to-code) distances."""
    if db.labels is None:
        raise ConfigurationError("mAP needs a labelled database")
    if R < 1:
        raise ConfigurationError(f"R must be >= 1, got {R}")
    query_codes = np.asarray(query_codes, dtype=np.int64).reshape(-1, db.N * db.M)
    query_labels = np.asarray(query_labels).reshape(-1)
    if len(query_codes) == 0:
        return 0.0
    if len(db) == 0:
        return 0.0
    _check_stamp(lt, db)
    aps = []
    for q, lab in zip(query_codes, query_labels):
        dist = lut_distances(lt, db.codes, check_codes(q, db.M, db.N, db.K))
        rel = db.labels[rank(db.item_ids, dist, R)] == lab
        aps.append(average_precision(rel, int(np.sum(db.labels == lab)), R))
    return float(np.mean(aps))
