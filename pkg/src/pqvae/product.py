"""Product quantizer: M independent sub-quantizers over contiguous latent chunks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, DimensionError
from .quantizer import Assignment, Codebook, assign, init_codebook


@dataclass
class ProductCodebook:
    subs: list[Codebook]

    def __post_init__(self):
        if not self.subs:
            raise ConfigurationError("a product codebook needs at least one sub-codebook")
        K, d = self.subs[0].K, self.subs[0].dim
        for cb in self.subs:
            if cb.K != K or cb.dim != d:
                raise ConfigurationError("all sub-codebooks must share K and sub-dimension")

    @property
    def M(self) -> int:
        return len(self.subs)

    @property
    def K(self) -> int:
        return self.subs[0].K

    @property
    def sub_dim(self) -> int:
        return self.subs[0].dim

    @property
    def D(self) -> int:
        return self.M * self.sub_dim

    def copy(self) -> "ProductCodebook":
        return ProductCodebook([cb.copy() for cb in self.subs])

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        """Concatenated codewords for codes of shape ``(B, N*M)`` -> ``(B, N*D)``."""
        codes = np.asarray(codes, dtype=np.int64)
        B, P = codes.shape
        if P % self.M:
            raise DimensionError(f"code length {P} is not a multiple of M={self.M}")
        chunks = [self.subs[p % self.M].codewords[codes[:, p]] for p in range(P)]
        if not chunks:
            return np.zeros((B, 0))
        return np.concatenate(chunks, axis=1)


def split_latent(z: np.ndarray, M: int) -> list[np.ndarray]:
    """Contiguous chunks: chunk m covers columns ``[m*d, (m+1)*d)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] % M:
        raise DimensionError(f"latent shape {z.shape} cannot be split into {M} chunks")
    d = z.shape[1] // M
    return [z[:, m * d : (m + 1) * d] for m in range(M)]


def init_product_codebook(
    z_e: np.ndarray, M: int, K: int, rng: np.random.Generator, gamma: float = 0.99
) -> ProductCodebook:
    """Seed each sub-codebook from the matching chunk of ``z_e`` (shape ``(B, D)``)."""
    return ProductCodebook([init_codebook(c, K, rng, gamma) for c in split_latent(z_e, M)])


def pq_assign(pcb: ProductCodebook, z_e: np.ndarray) -> tuple[list[Assignment], np.ndarray]:
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.ndim != 2 or z_e.shape[1] != pcb.D:
        raise DimensionError(f"latent shape {z_e.shape} does not match D={pcb.D}")
    asgs = [assign(cb, chunk) for cb, chunk in zip(pcb.subs, split_latent(z_e, pcb.M))]
    z_q = np.concatenate([a.quantized for a in asgs], axis=1)
    return asgs, z_q


def slots_to_rows(z: np.ndarray, N: int) -> np.ndarray:
    """``(B, N*D)`` item latents -> ``(B*N, D)`` slot latents, slot-major per item."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] % N:
        raise DimensionError(f"latent width {z.shape[1]} is not divisible by N={N}")
    return z.reshape(z.shape[0] * N, z.shape[1] // N)


def rows_to_slots(z: np.ndarray, N: int) -> np.ndarray:
    return z.reshape(z.shape[0] // N, N * z.shape[1])


def codes_from_assignments(asgs: list[Assignment], N: int) -> np.ndarray:
    """Stack per-sub indices into ``(B, N*M)`` codes, ``n`` outer and ``m`` inner."""
    idx = np.stack([a.indices for a in asgs], axis=1)  # (B*N, M)
    return idx.reshape(idx.shape[0] // N, N * idx.shape[1])


def encode(pcb: ProductCodebook, encoder: nn.DenseNet, batch: np.ndarray, N: int = 1) -> np.ndarray:
    """Discrete codes for a batch of inputs.

    Returns an int64 array of shape ``(B, N*M)``; entry ``n*M + m`` is the
    index chosen by sub-quantizer ``m`` for latent slot ``n``.
    """
    if encoder.output_dim != N * pcb.D:
        raise DimensionError(
            f"encoder emits {encoder.output_dim} values, expected N*D = {N * pcb.D}"
        )
    z_e, _ = nn.forward(encoder, batch)
    asgs, _ = pq_assign(pcb, slots_to_rows(z_e, N))
    return codes_from_assignments(asgs, N)


def bits_per_index(K: int) -> int:
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    return (K - 1).bit_length()


def rate_bits(N: int, M: int, K: int) -> int:
    """Code length in bits, ``N * M * log2(K)``.

    For K not a power of two each index costs ``ceil(log2 K)`` bits and a
    ``UserWarning`` is issued.
    """
    if N < 1 or M < 1:
        raise ConfigurationError(f"N and M must be >= 1, got N={N}, M={M}")
    bits = bits_per_index(K)
    if K & (K - 1):
        warnings.warn(f"K={K} is not a power of two; using {bits} bits per index", UserWarning)
    return N * M * bits
