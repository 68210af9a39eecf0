"""Single bottleneck vector quantizer.

Nearest-codeword assignment, the straight-through gradient pass, the
commitment penalty, and the two codebook update rules (mini-batch mean and
exponential moving average).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError

EMA_COUNT_EPS = 1e-10


@dataclass
class Codebook:
    codewords: np.ndarray  # (K, d)
    ema_counts: np.ndarray  # (K,)
    ema_sums: np.ndarray  # (K, d)
    gamma: float = 0.99

    def __post_init__(self):
        self.codewords = np.asarray(self.codewords, dtype=np.float64)
        if self.codewords.ndim != 2 or self.codewords.shape[0] < 1:
            raise ConfigurationError(f"codewords must be (K, d) with K >= 1, got {self.codewords.shape}")
        if self.ema_counts.shape != (self.K,) or self.ema_sums.shape != self.codewords.shape:
            raise DimensionError("EMA accumulators do not match codeword shape")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    @classmethod
    def from_codewords(cls, codewords, gamma: float = 0.99) -> "Codebook":
        """Codebook with empty (zero) EMA accumulators."""
        codewords = np.array(codewords, dtype=np.float64)
        return cls(codewords, np.zeros(codewords.shape[0]), np.zeros_like(codewords), gamma)

    def copy(self) -> "Codebook":
        return Codebook(
            self.codewords.copy(), self.ema_counts.copy(), self.ema_sums.copy(), self.gamma
        )


def init_codebook(z_e: np.ndarray, K: int, rng: np.random.Generator, gamma: float = 0.99) -> Codebook:
    """Seed a codebook with ``K`` rows drawn from ``z_e``.

    Rows are drawn without replacement unless the batch holds fewer than ``K``.
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    rows = rng.choice(z_e.shape[0], size=K, replace=z_e.shape[0] < K)
    return Codebook.from_codewords(z_e[rows], gamma)


@dataclass
class Assignment:
    indices: np.ndarray  # (B,) int64
    quantized: np.ndarray  # (B, d)
    quantization_error: float


def _sq_distances(z: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    # Explicit differences rather than the |a|^2+|b|^2-2ab expansion: exact
    # zeros and ties must stay exact.
    diff = z[:, None, :] - codewords[None, :, :]
    return np.einsum("bkd,bkd->bk", diff, diff)


def _check_input(cb: Codebook, z_e) -> np.ndarray:
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.ndim != 2 or z_e.shape[1] != cb.dim:
        raise DimensionError(f"input shape {z_e.shape} does not match codeword dim {cb.dim}")
    if not np.all(np.isfinite(z_e)):
        raise InputError("quantizer input contains NaN or Inf")
    return z_e


def assign(cb: Codebook, z_e: np.ndarray) -> Assignment:
    """Map each row of ``z_e`` to its nearest codeword (lowest index on ties)."""
    z_e = _check_input(cb, z_e)
    d2 = _sq_distances(z_e, cb.codewords)
    idx = np.argmin(d2, axis=1)
    err = float(d2[np.arange(len(idx)), idx].mean()) if len(idx) else 0.0
    return Assignment(idx.astype(np.int64), cb.codewords[idx], err)


def straight_through(z_e: np.ndarray, z_q: np.ndarray) -> np.ndarray:
    """Forward value of ``z_e + sg(z_q - z_e)``.

    Returned bitwise equal to ``z_q``. The matching backward rule is
    :func:`straight_through_backward`.
    """
    z_e = np.asarray(z_e)
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_e.shape != z_q.shape:
        raise DimensionError(f"straight_through shape mismatch {z_e.shape} vs {z_q.shape}")
    return z_q.copy()


def straight_through_backward(grad_output: np.ndarray) -> np.ndarray:
    """Gradient for ``z_e``; the codewords receive nothing through this path."""
    return np.asarray(grad_output, dtype=np.float64)


def commitment_loss(z_e: np.ndarray, z_q: np.ndarray) -> float:
    """Batch mean of ``||z_e - sg(z_q)||^2``."""
    z_e = np.asarray(z_e, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_e.shape != z_q.shape:
        raise DimensionError(f"commitment_loss shape mismatch {z_e.shape} vs {z_q.shape}")
    if z_e.shape[0] == 0:
        return 0.0
    return float(np.sum((z_e - z_q) ** 2) / z_e.shape[0])


def commitment_grad(z_e: np.ndarray, z_q: np.ndarray) -> np.ndarray:
    """Gradient of :func:`commitment_loss` w.r.t. ``z_e`` (``z_q`` held constant)."""
    z_e = np.asarray(z_e, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_e.shape != z_q.shape:
        raise DimensionError(f"commitment_grad shape mismatch {z_e.shape} vs {z_q.shape}")
    return 2.0 * (z_e - z_q) / z_e.shape[0]


def _cluster_stats(K: int, asg: Assignment, z_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.shape[0] != asg.indices.shape[0]:
        raise DimensionError("assignment and latent batch differ in length")
    counts = np.bincount(asg.indices, minlength=K).astype(np.float64)
    sums = np.zeros((K, z_e.shape[1]))
    np.add.at(sums, asg.indices, z_e)
    return counts, sums


def update_codebook_minibatch(cb: Codebook, asg: Assignment, z_e: np.ndarray) -> Codebook:
    """Replace every used codeword by the mean of the latents assigned to it.

    Unused codewords are left untouched. Returns a new codebook.
    """
    counts, sums = _cluster_stats(cb.K, asg, z_e)
    out = cb.copy()
    used = counts > 0
    out.codewords[used] = sums[used] / counts[used, None]
    return out


def update_codebook_ema(cb: Codebook, asg: Assignment, z_e: np.ndarray, lam: float = 1.0) -> Codebook:
    """Exponential-moving-average codebook update with increments scaled by ``lam``.

    ``n <- g*n + (1-g)*lam*count``, ``m <- g*m + (1-g)*lam*sum`` and the
    codeword becomes ``m / max(n, eps)``. Only codewords whose accumulated
    count is positive are rewritten; with ``lam == 0`` nothing changes.
    """
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    out = cb.copy()
    if lam == 0:
        return out
    counts, sums = _cluster_stats(cb.K, asg, z_e)
    g = cb.gamma
    out.ema_counts = g * cb.ema_counts + (1.0 - g) * lam * counts
    out.ema_sums = g * cb.ema_sums + (1.0 - g) * lam * sums
    live = out.ema_counts > 0
    out.codewords[live] = out.ema_sums[live] / np.maximum(out.ema_counts[live], EMA_COUNT_EPS)[:, None]
    return out


def nearest_two_distances(cb: Codebook, z_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distances to the nearest and second-nearest codeword."""
    if cb.K < 2:
        raise ConfigurationError("distance ratio needs at least two codewords")
    z_e = _check_input(cb, z_e)
    d2 = _sq_distances(z_e, cb.codewords)
    two = np.partition(d2, 1, axis=1)[:, :2]
    return np.sqrt(two[:, 0]), np.sqrt(two[:, 1])


def distance_ratio(cb: Codebook, z_e: np.ndarray) -> float:
    """Mean nearest-codeword distance over mean second-nearest distance."""
    d1, d2 = nearest_two_distances(cb, z_e)
    if d1.size == 0:
        raise ConfigurationError("distance ratio needs at least one input row")
    den = d2.mean()
    if den == 0.0:
        return 0.0
    return float(min(d1.mean() / den, 1.0))
