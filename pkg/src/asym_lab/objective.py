"""InfoNCE against a memory bank, its coefficients and analytic gradients.

Gradients flow into the source encodings ``z`` only; positives and bank entries
are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, DegenerateInputError, LabError, RngStream, ShapeError, l2_normalize

UNIT_TOL = 1e-6


class EmptyBankError(LabError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    epsilon: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.epsilon not in (0.0, 1.0):
            raise ConfigError(f"epsilon must be 0 or 1, got {self.epsilon}")


class MemoryBank:
    """Fixed-capacity FIFO ring of unit-norm encodings."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0 or dim <= 0:
            raise ConfigError("bank capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.data = np.zeros((capacity, dim))
        self.cursor = 0
        self.fill = 0

    @classmethod
    def random(cls, capacity: int, dim: int, rng: RngStream) -> "MemoryBank":
        bank = cls(capacity, dim)
        bank.data[:] = l2_normalize(rng.normal(size=(capacity, dim)))[0]
        bank.fill = capacity
        return bank

    def negatives(self) -> np.ndarray:
        """Copy of the filled region (order is irrelevant to the loss)."""
        if self.fill == self.capacity:
            return self.data.copy()
        return self.data[:self.fill].copy()

    def ordered(self) -> np.ndarray:
        """Stored entries oldest first."""
        if self.fill < self.capacity:
            return self.data[:self.fill].copy()
        return np.roll(self.data, -self.cursor, axis=0)

    def __len__(self):
        return self.fill


def bank_enqueue(bank: MemoryBank, batch: np.ndarray) -> MemoryBank:
    """FIFO insertion in place; returns ``bank`` for chaining."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[1] != bank.dim:
        raise ShapeError(f"bank dim {bank.dim} vs batch {batch.shape}")
    norms = np.linalg.norm(batch, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise DegenerateInputError(f"row {int(bad[0])} is not unit-norm (norm {norms[bad[0]]:.6f})")
    total = batch.shape[0]
    # rows older than the last `capacity` would be evicted within this call anyway
    batch = batch[-bank.capacity:]
    n = batch.shape[0]
    skipped = total - n
    start = (bank.cursor + skipped) % bank.capacity
    bank.data[(start + np.arange(n)) % bank.capacity] = batch
    bank.cursor = (bank.cursor + total) % bank.capacity
    bank.fill = min(bank.capacity, bank.fill + total)
    return bank


def _check_nan(*arrs):
    for a in arrs:
        if np.isnan(a).any():
            raise DegenerateInputError("NaN in loss inputs")


def _logsumexp(a: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp a)) with the max shifted out."""
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _shifted_logits(S: np.ndarray, s_pos: np.ndarray, cfg: LossConfig):
    """Per row: a_j = (S_j - s_pos)/tau and log(eps + sum_j exp a_j)."""
    a = (S - s_pos[:, None]) / cfg.temperature
    if cfg.epsilon > 0:
        ext = np.concatenate([np.full((a.shape[0], 1), np.log(cfg.epsilon)), a], axis=1)
        lse = _logsumexp(ext)
    else:
        lse = _logsumexp(a)
    return a, lse


def alpha_coefficients(S: np.ndarray, s_pos: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """alpha_ij = exp((S_ij - s_i)/tau) / (eps + sum_k exp((S_ik - s_i)/tau))."""
    S = np.asarray(S, dtype=np.float64)
    s_pos = np.asarray(s_pos, dtype=np.float64)
    _check_nan(S, s_pos)
    a, lse = _shifted_logits(S, s_pos, cfg)
    return np.exp(a - lse[:, None])


def _negatives(bank) -> np.ndarray:
    neg = bank.negatives() if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    if neg.shape[0] == 0:
        raise EmptyBankError("memory bank is empty")
    return neg


def _similarities(z, z_pos, neg):
    if z.shape != z_pos.shape or z.shape[1] != neg.shape[-1]:
        raise ShapeError(f"z{z.shape} z_pos{z_pos.shape} negatives{neg.shape}")
    return z @ neg.T, np.sum(z * z_pos, axis=1)


def info_nce(z: np.ndarray, z_pos: np.ndarray, bank, cfg: LossConfig) -> float:
    """Mean over rows of -log(e^{s/t} / (eps e^{s/t} + sum_j e^{S_j/t})), log-space."""
    neg = _negatives(bank)
    S, s = _similarities(z, z_pos, neg)
    _check_nan(S, s)
    _, lse = _shifted_logits(S, s, cfg)
    return float(lse.mean())


def info_nce_grad_z(z: np.ndarray, z_pos: np.ndarray, bank, cfg: LossConfig) -> np.ndarray:
    """dL/dz_i = (1/(N tau)) sum_j alpha_ij (neg_j - z_pos_i)."""
    neg = _negatives(bank)
    S, s = _similarities(z, z_pos, neg)
    alpha = alpha_coefficients(S, s, cfg)
    N = z.shape[0]
    g = alpha @ neg - alpha.sum(axis=1, keepdims=True) * z_pos
    return g / (N * cfg.temperature)


def info_nce_with_grad(z, z_pos, bank, cfg: LossConfig) -> tuple[float, np.ndarray]:
    neg = _negatives(bank)
    S, s = _similarities(z, z_pos, neg)
    _check_nan(S, s)
    a, lse = _shifted_logits(S, s, cfg)
    alpha = np.exp(a - lse[:, None])
    N = z.shape[0]
    g = (alpha @ neg - alpha.sum(axis=1, keepdims=True) * z_pos) / (N * cfg.temperature)
    return float(lse.mean()), g


def naive_info_nce(z, z_pos, negatives, cfg: LossConfig) -> float:
    """Direct evaluation of the formula, no log-space shifts. Test oracle only."""
    total = 0.0
    for i in range(z.shape[0]):
        pos = np.exp(z[i] @ z_pos[i] / cfg.temperature)
        den = cfg.epsilon * pos + sum(np.exp(z[i] @ n / cfg.temperature) for n in negatives)
        total += -np.log(pos / den)
    return total / z.shape[0]


# ---------------------------------------------------------------------------
# last-layer gradient flow (linear head z = W f, no normalization)
# ---------------------------------------------------------------------------


def _alpha_rows(alpha: np.ndarray, N: int, K: int) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = np.broadcast_to(alpha, (N, K))
    if alpha.shape != (N, K):
        raise ShapeError(f"alpha shape {alpha.shape} vs (N, K)=({N}, {K})")
    return alpha


def last_layer_grad_flow(W_t: np.ndarray, F: np.ndarray, F_t: np.ndarray, F_neg: np.ndarray,
                         alpha: np.ndarray, tau: float) -> np.ndarray:
    """dL/dW = (1/(tau N)) W' sum_i sum_j alpha_ij (f'_j - f'_i) f_i^T.

    ``W_t`` is the target weight [d, h]; ``F``/``F_t`` are source/target features
    [N, h]; ``F_neg`` holds the per-row negative target features [N, K, h].  The
    gradient-descent direction is the negation of the return value.
    """
    N, h = F.shape
    if F_t.shape != (N, h) or F_neg.ndim != 3 or F_neg.shape[0] != N or F_neg.shape[2] != h \
            or W_t.ndim != 2 or W_t.shape[1] != h:
        raise ShapeError(f"W'{W_t.shape} F{F.shape} F'{F_t.shape} F'_neg{F_neg.shape}")
    K = F_neg.shape[1]
    a = _alpha_rows(alpha, N, K)
    diff = np.einsum("nk,nkh->nh", a, F_neg) - a.sum(axis=1, keepdims=True) * F_t
    return W_t @ (diff.T @ F) / (tau * N)


def linear_head_loss(W: np.ndarray, W_t: np.ndarray, F, F_t, F_neg, cfg: LossConfig) -> float:
    """InfoNCE with unnormalized encodings z = W f, z' = W' f', per-row negatives."""
    z = F @ W.T
    zp = F_t @ W_t.T
    zn = np.einsum("nkh,dh->nkd", F_neg, W_t)
    S = np.einsum("nd,nkd->nk", z, zn)
    s = np.sum(z * zp, axis=1)
    _, lse = _shifted_logits(S, s, cfg)
    return float(lse.mean())


def linear_head_alpha(W, W_t, F, F_t, F_neg, cfg: LossConfig) -> np.ndarray:
    z = F @ W.T
    zn = np.einsum("nkh,dh->nkd", F_neg, W_t)
    S = np.einsum("nd,nkd->nk", z, zn)
    s = np.sum(z * (F_t @ W_t.T), axis=1)
    return alpha_coefficients(S, s, cfg)
