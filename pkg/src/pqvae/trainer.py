"""PQ-VAE training loop.

The per-step objective is

    mse(x, x_hat) + lam * beta * mean ||z_e - sg(z_q)||^2
                  + lam * mean ||sg(z_e) - z_q||^2

where the decoder sees ``z_q`` through the straight-through estimator. The
last (codeword) term only produces gradients in ``loss_gradient`` mode; in
``ema`` and ``minibatch`` mode the codewords are moved by the update rules in
:mod:`pqvae.quantizer` instead.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, DimensionError, InputError, TrainingError
from .product import (
    ProductCodebook,
    codes_from_assignments,
    init_product_codebook,
    pq_assign,
    rows_to_slots,
    slots_to_rows,
    split_latent,
)
from .quantizer import (
    Assignment,
    commitment_grad,
    commitment_loss,
    distance_ratio,
    straight_through,
    straight_through_backward,
    update_codebook_ema,
    update_codebook_minibatch,
)

UPDATE_MODES = ("ema", "minibatch", "loss_gradient")


@dataclass
class TrainConfig:
    K: int = 8
    M: int = 4
    D: int = 8
    N: int = 1
    beta: float = 0.25
    lam: float = 1.0
    gamma: float = 0.99
    learning_rate: float = 2e-4
    batch_size: int = 100
    iterations: int = 2000
    codebook_update_mode: str = "ema"
    seed: int = 0
    encoder_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64)

    def validate(self) -> "TrainConfig":
        if self.K < 1 or self.M < 1 or self.D < 1 or self.N < 1:
            raise ConfigurationError("K, M, D and N must all be >= 1")
        if self.D % self.M:
            raise ConfigurationError(f"M={self.M} must divide D={self.D}")
        if self.beta < 0 or self.lam < 0:
            raise ConfigurationError("beta and lambda must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("batch_size must be >= 1 and iterations >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.codebook_update_mode not in UPDATE_MODES:
            raise ConfigurationError(
                f"codebook_update_mode must be one of {UPDATE_MODES}, got {self.codebook_update_mode!r}"
            )
        return self


@dataclass
class Diagnostics:
    iteration: int
    loss: float
    recon_error: float
    quant_error: float
    distance_ratio: float | None
    code_entropy: list[float]
    codeword_usage: list[list[int]]

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class LossTerms:
    value: float
    recon: float
    commitment: float
    codeword: float
    grad_x_hat: np.ndarray
    grad_z_e: np.ndarray  # commitment contribution only
    grad_z_q: np.ndarray  # codeword-term gradient w.r.t. the selected codewords


def total_loss(x, x_hat, z_e, z_q, beta: float, lam: float, mode: str = "ema") -> LossTerms:
    """Scalar objective plus the gradient pieces routed to each consumer.

    ``grad_x_hat`` feeds the decoder (and reaches the encoder through the
    straight-through path), ``grad_z_e`` is the commitment gradient for the
    encoder, and ``grad_z_q`` is the codeword-term gradient, zero unless
    ``mode == "loss_gradient"``.
    """
    if beta < 0 or lam < 0:
        raise ConfigurationError("beta and lambda must be non-negative")
    if mode not in UPDATE_MODES:
        raise ConfigurationError(f"unknown codebook update mode {mode!r}")
    z_e = np.asarray(z_e, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    recon = nn.mse(x, x_hat)
    commit = commitment_loss(z_e, z_q)
    value = recon + lam * beta * commit + lam * commit
    grad_z_q = (
        lam * commitment_grad(z_q, z_e) if mode == "loss_gradient" else np.zeros_like(z_q)
    )
    return LossTerms(
        value=value,
        recon=recon,
        commitment=commit,
        codeword=commit,
        grad_x_hat=nn.mse_grad(x_hat, x),
        grad_z_e=lam * beta * commitment_grad(z_e, z_q),
        grad_z_q=grad_z_q,
    )


@dataclass
class StepResult:
    terms: LossTerms
    encoder_grads: list[np.ndarray]
    decoder_grads: list[np.ndarray]
    codeword_grads: list[np.ndarray]  # one (K, d) array per sub-quantizer
    z_e_rows: np.ndarray  # (B*N, D) encoder output, one row per latent slot
    assignments: list[Assignment]


def _frozen_assignments(pcb: ProductCodebook, z_rows: np.ndarray, indices: np.ndarray):
    asgs = []
    for m, (cb, chunk) in enumerate(zip(pcb.subs, split_latent(z_rows, pcb.M))):
        idx = np.asarray(indices[:, m], dtype=np.int64)
        q = cb.codewords[idx]
        asgs.append(Assignment(idx, q, float(np.sum((chunk - q) ** 2) / max(len(idx), 1))))
    return asgs, np.concatenate([a.quantized for a in asgs], axis=1)


def compute_step(
    encoder: nn.DenseNet,
    decoder: nn.DenseNet,
    pcb: ProductCodebook,
    x: np.ndarray,
    cfg: TrainConfig,
    frozen_indices: np.ndarray | None = None,
) -> StepResult:
    """Loss and all gradients for one batch.

    ``frozen_indices`` (shape ``(B*N, M)``) bypasses nearest-neighbour
    assignment; gradient checks use it to hold the quantizer fixed.
    """
    N = cfg.N
    z_e, enc_cache = nn.forward(encoder, x)
    z_rows = slots_to_rows(z_e, N)
    if frozen_indices is None:
        asgs, zq_rows = pq_assign(pcb, z_rows)
    else:
        asgs, zq_rows = _frozen_assignments(pcb, z_rows, frozen_indices)
    z_q = rows_to_slots(zq_rows, N)
    x_hat, dec_cache = nn.forward(decoder, straight_through(z_e, z_q))
    terms = total_loss(x, x_hat, z_e, z_q, cfg.beta, cfg.lam, cfg.codebook_update_mode)

    grad_dec_in, dec_grads = nn.backward(decoder, dec_cache, terms.grad_x_hat)
    grad_z_e = straight_through_backward(grad_dec_in) + terms.grad_z_e
    _, enc_grads = nn.backward(encoder, enc_cache, grad_z_e)

    cw_grads = [np.zeros_like(cb.codewords) for cb in pcb.subs]
    if cfg.codebook_update_mode == "loss_gradient":
        gq_rows = slots_to_rows(terms.grad_z_q, N)
        for m, g in enumerate(split_latent(gq_rows, pcb.M)):
            np.add.at(cw_grads[m], asgs[m].indices, g)
    return StepResult(terms, enc_grads, dec_grads, cw_grads, z_rows, asgs)


def code_entropy_bits(indices: np.ndarray, K: int) -> tuple[float, np.ndarray]:
    """Empirical entropy (bits) of a batch of code indices and the usage counts."""
    counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=K)
    total = counts.sum()
    if total == 0:
        return 0.0, counts
    p = counts[counts > 0] / total
    h = float(-(p * np.log2(p)).sum())
    return max(h, 0.0), counts


def pq_distance_ratio(pcb: ProductCodebook, z_rows: np.ndarray) -> float | None:
    """Mean of the per-sub-quantizer distance ratios; ``None`` when K < 2."""
    if pcb.K < 2:
        return None
    return float(
        np.mean([distance_ratio(cb, c) for cb, c in zip(pcb.subs, split_latent(z_rows, pcb.M))])
    )


def _diagnostics(it: int, step: StepResult, pcb: ProductCodebook) -> Diagnostics:
    entropies, usage = [], []
    for a in step.assignments:
        h, counts = code_entropy_bits(a.indices, pcb.K)
        entropies.append(h)
        usage.append([int(c) for c in counts])
    return Diagnostics(
        iteration=it,
        loss=step.terms.value,
        recon_error=step.terms.recon,
        quant_error=step.terms.commitment,
        distance_ratio=pq_distance_ratio(pcb, step.z_e_rows),
        code_entropy=entropies,
        codeword_usage=usage,
    )


@dataclass
class TrainResult:
    encoder: nn.DenseNet
    decoder: nn.DenseNet
    codebook: ProductCodebook
    diagnostics: list[Diagnostics] = field(default_factory=list)
    N: int = 1


def _all_finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def init_model(cfg: TrainConfig, data: np.ndarray):
    """Initial encoder, decoder, product codebook and the batch-sampling RNG."""
    cfg.validate()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise DimensionError(f"training data must be a non-empty 2-D array, got {data.shape}")
    init_ss, batch_ss, cb_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(init_ss)
    batch_rng = np.random.default_rng(batch_ss)
    L = data.shape[1]
    encoder = nn.init_dense_net([L, *cfg.encoder_hidden, cfg.N * cfg.D], init_rng)
    decoder = nn.init_dense_net([cfg.N * cfg.D, *cfg.decoder_hidden, L], init_rng)
    first = data[_sample(batch_rng, data.shape[0], cfg.batch_size)]
    z0, _ = nn.forward(encoder, first)
    pcb = init_product_codebook(
        slots_to_rows(z0, cfg.N), cfg.M, cfg.K, np.random.default_rng(cb_ss), cfg.gamma
    )
    return encoder, decoder, pcb, batch_rng


def _sample(rng: np.random.Generator, n: int, B: int) -> np.ndarray:
    return rng.choice(n, size=B, replace=n < B)


def train(cfg: TrainConfig, data: np.ndarray) -> TrainResult:
    """Train encoder, decoder and product codebook on ``data`` (``(n, L)``).

    Raises:
        TrainingError: on a non-finite loss or gradient. ``checkpoint`` holds
            the last finite ``TrainResult``.
    """
    data = np.asarray(data, dtype=np.float64)
    encoder, decoder, pcb, batch_rng = init_model(cfg, data)
    net_params = encoder.params() + decoder.params()
    adam = nn.AdamState.for_params(net_params, cfg.learning_rate)
    cw_adam = nn.AdamState.for_params([cb.codewords for cb in pcb.subs], cfg.learning_rate)
    log: list[Diagnostics] = []

    for it in range(1, cfg.iterations + 1):
        x = data[_sample(batch_rng, data.shape[0], cfg.batch_size)]
        try:
            step = compute_step(encoder, decoder, pcb, x, cfg)
        except InputError as exc:
            raise TrainingError(
                f"non-finite latents at iteration {it}",
                payload={"iteration": it, "detail": str(exc)},
                checkpoint=TrainResult(encoder, decoder, pcb, log, cfg.N),
            ) from exc
        grads = step.encoder_grads + step.decoder_grads
        if not math.isfinite(step.terms.value) or not _all_finite(grads):
            raise TrainingError(
                f"non-finite loss at iteration {it}",
                payload={"iteration": it, "loss": step.terms.value, "recon": step.terms.recon},
                checkpoint=TrainResult(encoder, decoder, pcb, log, cfg.N),
            )
        log.append(_diagnostics(it, step, pcb))

        snapshot = (encoder.copy(), decoder.copy(), pcb.copy())
        nn.adam_step(adam, net_params, grads)
        if cfg.codebook_update_mode == "loss_gradient":
            nn.adam_step(cw_adam, [cb.codewords for cb in pcb.subs], step.codeword_grads)
        elif cfg.lam > 0:
            for m, (cb, chunk) in enumerate(zip(pcb.subs, split_latent(step.z_e_rows, pcb.M))):
                if cfg.codebook_update_mode == "ema":
                    new = update_codebook_ema(cb, step.assignments[m], chunk, cfg.lam)
                else:
                    new = update_codebook_minibatch(cb, step.assignments[m], chunk)
                # in-place keeps the codeword arrays shared with cw_adam
                cb.codewords[...] = new.codewords
                cb.ema_counts[...] = new.ema_counts
                cb.ema_sums[...] = new.ema_sums
        if not _all_finite(net_params + [cb.codewords for cb in pcb.subs]):
            raise TrainingError(
                f"parameters became non-finite at iteration {it}",
                payload={"iteration": it},
                checkpoint=TrainResult(*snapshot, log, cfg.N),
            )
    return TrainResult(encoder, decoder, pcb, log, cfg.N)


@dataclass
class Evaluation:
    recon_error: float
    quant_error: float
    distance_ratio: float | None


def evaluate_model(result: TrainResult, data: np.ndarray) -> Evaluation:
    """Reconstruction error, quantization error and distance ratio over ``data``."""
    z_e, _ = nn.forward(result.encoder, data)
    z_rows = slots_to_rows(z_e, result.N)
    _, zq_rows = pq_assign(result.codebook, z_rows)
    x_hat, _ = nn.forward(result.decoder, rows_to_slots(zq_rows, result.N))
    quant = commitment_loss(z_e, rows_to_slots(zq_rows, result.N))
    return Evaluation(nn.mse(data, x_hat), quant, pq_distance_ratio(result.codebook, z_rows))


@dataclass
class SweepRow:
    lam: float
    distance_ratio: float | None
    recon_error: float
    quant_error: float


DEFAULT_LAMBDA_GRID = (0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


def sweep_lambda(cfg: TrainConfig, data: np.ndarray, lambda_grid=DEFAULT_LAMBDA_GRID) -> list[SweepRow]:
    """One training run per lambda; metrics are measured on ``data`` after training."""
    grid = sorted(float(v) for v in lambda_grid)
    if not grid:
        raise ConfigurationError("lambda grid is empty")
    rows = []
    for lam in grid:
        res = train(_with(cfg, lam=lam), data)
        ev = evaluate_model(res, data)
        rows.append(SweepRow(lam, ev.distance_ratio, ev.recon_error, ev.quant_error))
    return rows


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    return TrainConfig(**{**asdict(cfg), **changes})


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write("lambda,distance_ratio,recon_error,quant_error\n")
    for r in rows:
        ratio = "" if r.distance_ratio is None else repr(r.distance_ratio)
        buf.write(f"{r.lam!r},{ratio},{r.recon_error!r},{r.quant_error!r}\n")
    return buf.getvalue()


def diagnostics_to_jsonl(log: list[Diagnostics]) -> str:
    return "".join(d.to_json() + "\n" for d in log)


def read_diagnostics(text: str) -> list[Diagnostics]:
    return [Diagnostics(**json.loads(line)) for line in text.splitlines() if line.strip()]


def latents_csv(
    encoder: nn.DenseNet, pcb: ProductCodebook, data: np.ndarray, labels, N: int = 1
) -> str:
    """Comma-separated ``x1,x2,label,code_index`` rows for a 2-D latent space.

    ``code_index`` flattens the per-sub indices as a mixed-radix number
    (first sub-quantizer most significant).
    """
    if pcb.D != 2 or N != 1:
        raise ConfigurationError(f"latent export needs a 2-D latent with N=1, got D={pcb.D}, N={N}")
    buf = io.StringIO()
    buf.write("x1,x2,label,code_index\n")
    data = np.asarray(data, dtype=np.float64).reshape(-1, encoder.input_dim)
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != len(data):
        raise DimensionError("labels and data differ in length")
    if len(data) == 0:
        return buf.getvalue()
    z_e, _ = nn.forward(encoder, data)
    asgs, _ = pq_assign(pcb, z_e)
    codes = codes_from_assignments(asgs, 1)
    flat = np.zeros(len(data), dtype=np.int64)
    for m in range(pcb.M):
        flat = flat * pcb.K + codes[:, m]
    for (a, b), lab, c in zip(z_e, labels, flat):
        buf.write(f"{float(a)!r},{float(b)!r},{int(lab)},{int(c)}\n")
    return buf.getvalue()
