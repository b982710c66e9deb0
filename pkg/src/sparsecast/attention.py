"""Attention kernels with exact multiply accounting.

All kernels accept optional leading batch dimensions: ``Q`` is
``(..., L_Q, d)``, ``K`` is ``(..., L_K, d)``, ``V`` is ``(..., L_K, d_v)``.
Counters are charged per batch element, so a batch of ``B`` windows costs
``B`` times the single-window formula.

The sparse path shares one Top-u index set across the batch: the sparsity
scores are averaged over leading dimensions before selection. With a
single window this is exactly the per-query measurement.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = [
    "AttentionConfig",
    "OpCounters",
    "n_top",
    "n_sample",
    "sample_keys",
    "full_attention",
    "sparsity_measure",
    "top_u_select",
    "prob_sparse_attention",
    "efficient_attention",
]


@dataclass
class AttentionConfig:
    d: int = 16
    u_factor: float = 5.0
    sample_factor: float = 5.0
    causal: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError(f"d must be positive, got {self.d}")
        if self.u_factor <= 0 or self.sample_factor <= 0:
            raise ValueError("u_factor and sample_factor must be positive")


@dataclass
class OpCounters:
    """Scalar-multiply counts for attention kernels.

    ``measurement_dot_products`` and ``attention_dot_products`` count the
    multiplies spent forming query-key scores for the sparsity measurement
    and for the attention itself; ``multiplies_total`` additionally counts
    the probability-times-value products.
    """

    measurement_dot_products: int = 0
    attention_dot_products: int = 0
    multiplies_total: int = 0

    def reset(self) -> None:
        self.measurement_dot_products = 0
        self.attention_dot_products = 0
        self.multiplies_total = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


def n_top(length: int, u_factor: float) -> int:
    """u = ceil(c ln L), clamped to [1, L]."""
    if length < 1:
        raise ValueError(f"sequence length must be positive, got {length}")
    return int(min(length, max(1, math.ceil(u_factor * math.log(length)))))


def n_sample(length: int, sample_factor: float) -> int:
    return int(min(length, max(1, math.ceil(sample_factor * math.log(length)))))


def sample_keys(length: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted key positions drawn without replacement."""
    return np.sort(rng.choice(length, size=size, replace=False))


def _batch(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if Q.ndim < 2 or K.ndim < 2 or V.ndim < 2:
        raise DimensionError("attention inputs must have rank >= 2")
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query width {Q.shape} does not match key width {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"{K.shape[-2]} keys but {V.shape[-2]} values")


def _causal_mask(rows: np.ndarray, n_keys: int) -> np.ndarray:
    keys = np.arange(n_keys)
    return np.where(keys[None, :] > rows[:, None], -np.inf, 0.0)


def full_attention(Q, K, V, causal: bool = False, counters: OpCounters | None = None) -> Tensor:
    """Softmax(Q K^T / sqrt(d)) V over every query and key."""
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    _check_qkv(Q, K, V)
    L_Q, d = Q.shape[-2:]
    L_K, d_v = V.shape[-2:]
    if causal and L_Q != L_K:
        raise DimensionError(f"causal attention needs L_Q == L_K, got {L_Q} and {L_K}")
    scores = ad.scale(ad.matmul(Q, ad.transpose(K), row_stable=True), 1.0 / math.sqrt(d))
    if causal:
        scores = ad.add(scores, _causal_mask(np.arange(L_Q), L_K))
    out = ad.matmul(ad.softmax(scores, axis=-1), V, row_stable=True)
    if counters is not None:
        b = _batch(Q.shape)
        counters.attention_dot_products += b * L_Q * L_K * d
        counters.multiplies_total += b * L_Q * L_K * (d + d_v)
    return out


def sparsity_measure(Q, K_sampled, counters: OpCounters | None = None) -> np.ndarray:
    """Max-minus-mean of scaled scores per query, averaged over batch dims.

    Not differentiable: the result only drives index selection.
    """
    q = Q.data if isinstance(Q, Tensor) else np.asarray(Q, dtype=np.float64)
    k = K_sampled.data if isinstance(K_sampled, Tensor) else np.asarray(K_sampled, dtype=np.float64)
    if k.shape[-2] < 1:
        raise ValueError("sparsity_measure: empty key sample")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape} does not match key width {k.shape}")
    d = q.shape[-1]
    s = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(d)
    m = np.maximum(s.max(axis=-1) - s.mean(axis=-1), 0.0)
    if counters is not None:
        n = _batch(q.shape) * q.shape[-2] * k.shape[-2] * d
        counters.measurement_dot_products += n
        counters.multiplies_total += n
    return m.reshape(-1, q.shape[-2]).mean(axis=0)


def top_u_select(scores: Sequence[float], u: int) -> list[int]:
    """Indices of the ``u`` largest scores, lower index first on ties, ascending."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 1 <= u <= s.size:
        raise ValueError(f"u must lie in [1, {s.size}], got {u}")
    # stable sort on -score keeps lower indices ahead among equal scores
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[:u])


def _validate_reuse(indices: Sequence[int], length: int) -> list[int]:
    idx = [int(i) for i in indices]
    if not idx:
        raise ValueError("reuse_indices must not be empty")
    if len(set(idx)) != len(idx):
        raise ValueError(f"reuse_indices contain duplicates: {idx}")
    bad = [i for i in idx if not 0 <= i < length]
    if bad:
        raise IndexError(f"reuse_indices {bad} out of range for {length} queries")
    return sorted(idx)


def prob_sparse_attention(
    Q,
    K,
    V,
    cfg: AttentionConfig,
    reuse_indices: Sequence[int] | None = None,
    counters: OpCounters | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[int]]:
    """Top-u query attention; inactive query rows receive the Fill row.

    Without ``reuse_indices`` the active set is measured on a seeded key
    sample. With them, measurement is skipped entirely.
    """
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    _check_qkv(Q, K, V)
    L_Q, d = Q.shape[-2:]
    L_K, d_v = V.shape[-2:]
    if cfg.causal and L_Q != L_K:
        raise DimensionError(f"causal attention needs L_Q == L_K, got {L_Q} and {L_K}")

    if reuse_indices is None:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        picked = sample_keys(L_K, n_sample(L_K, cfg.sample_factor), rng)
        scores = sparsity_measure(Q, K.data[..., picked, :], counters)
        idx = top_u_select(scores, n_top(L_Q, cfg.u_factor))
    else:
        idx = _validate_reuse(reuse_indices, L_Q)
    rows = np.asarray(idx, dtype=np.int64)

    q_act = ad.gather_rows(Q, rows)
    scores = ad.scale(ad.matmul(q_act, ad.transpose(K), row_stable=True), 1.0 / math.sqrt(d))
    if cfg.causal:
        scores = ad.add(scores, _causal_mask(rows, L_K))
    active = ad.matmul(ad.softmax(scores, axis=-1), V, row_stable=True)

    if cfg.causal:
        counts = np.arange(1, L_K + 1, dtype=np.float64)[:, None]
        fill = ad.mul(ad.cumsum(V, axis=-2), 1.0 / counts)
    else:
        fill = ad.broadcast_to(ad.mean(V, axis=-2, keepdims=True), V.shape[:-2] + (L_Q, d_v))
    out = ad.scatter_rows(fill, active, rows)

    if counters is not None:
        b = _batch(Q.shape)
        counters.attention_dot_products += b * rows.size * L_K * d
        counters.multiplies_total += b * rows.size * L_K * (d + d_v)
    return out, idx


def efficient_attention(Q, K, V, counters: OpCounters | None = None) -> Tensor:
    """(K_n V^T)^T Q_n with K softmaxed along d and Q softmaxed along d_q.

    Shapes: Q ``(..., d_q, d)``, K ``(..., d_k, d)``, V ``(..., d_v, d)``;
    result ``(..., d_v, d)``. Cost is linear in ``d``.
    """
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    if Q.ndim < 2 or K.ndim < 2 or V.ndim < 2:
        raise DimensionError("efficient_attention inputs must have rank >= 2")
    if Q.shape[-2] != K.shape[-2]:
        raise DimensionError(f"d_q must equal d_k: Q {Q.shape}, K {K.shape}")
    if not Q.shape[-1] == K.shape[-1] == V.shape[-1]:
        raise DimensionError(f"length axis mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    d_k, d = K.shape[-2:]
    d_v = V.shape[-2]
    k_n = ad.softmax(K, axis=-1)
    q_n = ad.softmax(Q, axis=-2)
    context = ad.matmul(k_n, ad.transpose(V))  # (..., d_k, d_v)
    out = ad.matmul(ad.transpose(context), q_n)
    if counters is not None:
        b = _batch(Q.shape)
        counters.multiplies_total += b * 2 * d_k * d_v * d
    return out
