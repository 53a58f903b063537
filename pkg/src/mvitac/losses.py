"""InfoNCE with in-batch negatives and the weighted multimodal objective.

Each of the four directed losses treats row i's key as the positive for
query i and every other key in the batch as a negative. The softmax
denominator includes the positive, so a batch with all-equal similarities
yields exactly ln(N). Logits are max-shifted per row before exponentiation;
at the default temperature 0.07 raw logits reach ~14.3 and would overflow
float32 exponentials without the shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    ConformabilityError,
    InsufficientNegativesError,
    NormalizationContractError,
)

UNIT_NORM_TOL = 1e-3


@dataclass(frozen=True)
class LossWeights:
    """Temperature and inter-modal weighting of the combined objective."""

    tau: float = 0.07
    lambda_inter: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_inter < 0:
            raise ConfigError(f"lambda_inter must be >= 0, got {self.lambda_inter}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss values for one batch; l_mm is the training objective."""

    l_vv: float
    l_tt: float
    l_vt: float
    l_tv: float
    l_mm: float


def _check_unit_rows(name: str, x: np.ndarray) -> None:
    norms = np.linalg.norm(x.astype(np.float64), axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > UNIT_NORM_TOL:
        raise NormalizationContractError(
            f"{name} rows deviate from unit norm by {worst:.3e} (> {UNIT_NORM_TOL:g})")


def info_nce(queries: T.Tensor, keys: T.Tensor, tau: float) -> T.Tensor:
    """Mean InfoNCE loss over the batch, differentiable through both sides.

    queries, keys: [N, D] with unit-norm rows; positive pairs sit on the
    diagonal of the similarity matrix and the remaining N-1 keys of each row
    act as negatives.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if queries.ndim != 2 or keys.ndim != 2 or queries.shape != keys.shape:
        raise ConformabilityError("info_nce", queries.shape, keys.shape)
    n = queries.shape[0]
    if n < 2:
        raise InsufficientNegativesError(
            f"info_nce needs a batch of at least 2, got {n}")
    _check_unit_rows("queries", queries.data)
    _check_unit_rows("keys", keys.data)

    logits = (queries.data @ keys.data.T) / tau
    shift = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - shift)
    denom = z.sum(axis=1, keepdims=True)
    softmax = z / denom
    log_denom = np.log(denom[:, 0]) + shift[:, 0]
    loss = float(np.mean(log_denom - np.diag(logits)))
    out_data = np.array([loss], dtype=queries.data.dtype)

    def backward(g):
        # d(loss)/d(logits) = (softmax - I) / N, then chain through q.k'/tau
        dlogits = (softmax - np.eye(n, dtype=softmax.dtype)) * (g[0] / (n * tau))
        gq = dlogits @ keys.data if queries.requires_grad or queries.node else None
        gk = dlogits.T @ queries.data if keys.requires_grad or keys.node else None
        return gq, gk

    return T.record("info_nce", (queries, keys), out_data, backward)


@dataclass
class EmbeddingSet:
    """The eight unit-norm embedding matrices produced by one forward pass."""

    z_vv_q: T.Tensor
    z_vv_k: T.Tensor
    z_tt_q: T.Tensor
    z_tt_k: T.Tensor
    z_vt_q: T.Tensor
    z_vt_k: T.Tensor
    z_tv_q: T.Tensor
    z_tv_k: T.Tensor

    def batch_size(self) -> int:
        return self.z_vv_q.shape[0]


def combined_loss(embeddings: EmbeddingSet,
                  weights: LossWeights) -> tuple[T.Tensor, LossBreakdown]:
    """Weighted sum of the two intra- and two inter-modal InfoNCE losses.

    Returns the differentiable scalar objective together with the per-term
    breakdown for logging.
    """
    e = embeddings
    l_vv = info_nce(e.z_vv_q, e.z_vv_k, weights.tau)
    l_tt = info_nce(e.z_tt_q, e.z_tt_k, weights.tau)
    l_vt = info_nce(e.z_vt_q, e.z_vt_k, weights.tau)
    l_tv = info_nce(e.z_tv_q, e.z_tv_k, weights.tau)
    intra = T.add(l_vv, l_tt)
    inter = T.scale(T.add(l_vt, l_tv), weights.lambda_inter)
    total = T.add(intra, inter)
    # breakdown arithmetic in double precision so the weighted-sum identity
    # holds exactly for consumers; the tensor objective agrees within 1e-6
    vv, tt, vt, tv = l_vv.item(), l_tt.item(), l_vt.item(), l_tv.item()
    breakdown = LossBreakdown(
        l_vv=vv, l_tt=tt, l_vt=vt, l_tv=tv,
        l_mm=vv + tt + weights.lambda_inter * (vt + tv))
    return total, breakdown


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean softmax cross-entropy of [N,C] logits against integer labels."""
    if logits.ndim != 2:
        raise ConformabilityError("cross_entropy", logits.shape)
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ConformabilityError("cross_entropy", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels out of range for {c} classes")

    x = logits.data
    shift = x.max(axis=1, keepdims=True)
    z = np.exp(x - shift)
    denom = z.sum(axis=1, keepdims=True)
    softmax = z / denom
    log_probs = (x - shift) - np.log(denom)
    loss = float(-np.mean(log_probs[np.arange(n), labels]))
    out_data = np.array([loss], dtype=x.dtype)

    def backward(g):
        grad = softmax.copy()
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g[0] / n),)

    return T.record("cross_entropy", (logits,), out_data, backward)
