"""Attention-map distillation losses at two resolutions.

Global guidance compares pooled low-resolution attention maps; local guidance
compares only the rows of the most salient queries, chosen from the
full-precision model.  Both are MSE terms added to the block reconstruction
loss with small weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import as_matrix, avg_pool_rows, row_softmax, top_k_indices


@dataclass(frozen=True)
class DistillConfig:
    """Pooling stride, salient query count, and loss weights."""

    stride: int = 8
    salient_k: int = 16
    lambda_global: float = 1e-4
    lambda_local: float = 1e-4

    def __post_init__(self):
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if self.salient_k < 1:
            raise ParameterError(f"salient_k must be >= 1, got {self.salient_k}")
        if self.lambda_global < 0 or self.lambda_local < 0:
            raise ParameterError("loss weights must be nonnegative")

    @classmethod
    def defaults_for(cls, seq_len: int, lambda_global: float = 1e-4,
                     lambda_local: float = 1e-4) -> "DistillConfig":
        """Desk-scale defaults: pooled length ~ L/8, salient k = max(4, L/4)."""
        return cls(
            stride=max(1, seq_len // 8),
            salient_k=min(seq_len, max(4, seq_len // 4)),
            lambda_global=lambda_global,
            lambda_local=lambda_local,
        )


@dataclass(frozen=True)
class SaliencyProfile:
    """Per-token received attention mass and its descending order."""

    s: np.ndarray
    order: np.ndarray


@dataclass(frozen=True)
class DistillReport:
    """Combined objective with its three terms reported separately."""

    total: float
    l_quant: float
    l_global: float
    l_local: float


def token_saliency(a) -> SaliencyProfile:
    """Column sums of a row-stochastic map: total attention each token receives."""
    a = as_matrix(a, "a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"attention map must be square, got {a.shape}")
    if not np.allclose(a.sum(axis=1), 1.0, atol=1e-6):
        raise ParameterError("attention map rows must sum to 1")
    s = a.sum(axis=0)
    return SaliencyProfile(s=s, order=top_k_indices(s, n))


def heavy_tail_stats(p: SaliencyProfile, mass: float) -> int:
    """Smallest n such that the top-n tokens hold >= mass of the total saliency."""
    if not 0.0 < mass < 1.0:
        raise ParameterError(f"mass must be in (0, 1), got {mass}")
    sorted_s = p.s[p.order]
    cum = np.cumsum(sorted_s)
    return int(np.searchsorted(cum, mass * cum[-1] - 1e-12) + 1)


def _scaled_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    # multiply by the reciprocal so sliced maps are bit-identical to full ones
    return q @ k.T * (1.0 / math.sqrt(q.shape[1]))


def global_attention(q, k, stride: int) -> np.ndarray:
    """Low-resolution map: pool queries and keys, then softmax the scaled product."""
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if q.shape != k.shape:
        raise ShapeError(f"q and k must share shape, got {q.shape} vs {k.shape}")
    return row_softmax(_scaled_logits(avg_pool_rows(q, stride), avg_pool_rows(k, stride)))


def local_attention(q, k, idx) -> np.ndarray:
    """High-resolution map restricted to the selected query rows.

    Logits are computed for all rows and then sliced (cheap at desk scale),
    which keeps the result bit-identical to the corresponding rows of the
    full map; row-wise softmax commutes with slicing.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ParameterError("index set must be nonempty")
    if (idx < 0).any() or (idx >= q.shape[0]).any():
        raise ParameterError(f"indices must lie in [0, {q.shape[0]})")
    return row_softmax(_scaled_logits(q, k)[idx])


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"compared maps differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def global_loss(fp_q, fp_k, q_q, q_k, stride: int) -> float:
    """MSE between the pooled maps of the reference and quantized models."""
    return _mse(global_attention(fp_q, fp_k, stride), global_attention(q_q, q_k, stride))


def local_loss(fp_q, fp_k, q_q, q_k, idx) -> float:
    """MSE between the salient-row maps; idx comes from the reference model."""
    return _mse(local_attention(fp_q, fp_k, idx), local_attention(q_q, q_k, idx))


def salient_queries(a_full, k: int) -> np.ndarray:
    """Indices of the k most salient queries of a full-precision map."""
    profile = token_saliency(a_full)
    return profile.order[:k]


def distill_objective(block_fp, block_q, cfg: DistillConfig, batch,
                      mask=None) -> DistillReport:
    """Combined calibration objective over a batch of inputs.

    l_quant is the block-output MSE between the reference block and its
    fake-quantized twin; the pooled and salient guidance terms are weighted
    in with cfg. Salient indices are taken from the reference model per
    sample. Terms are averaged over the batch.
    """
    from .calib import forward_details  # local import: calib builds on this module

    if block_fp.d_in != block_q.block.d_in or block_fp.d_out != block_q.block.d_out:
        raise ShapeError("blocks must be structurally identical")
    l_quant = l_global = l_local = 0.0
    for x in batch:
        fp = forward_details(block_fp, x, mask=mask, quant=None)
        qd = forward_details(block_q.block, x, mask=mask, quant=block_q.quant)
        l_quant += _mse(fp.out, qd.out)
        l_global += global_loss(fp.q, fp.k, qd.q, qd.k, cfg.stride)
        idx = salient_queries(fp.a_full, min(cfg.salient_k, fp.q.shape[0]))
        l_local += local_loss(fp.q, fp.k, qd.q, qd.k, idx)
    n = len(batch)
    l_quant, l_global, l_local = l_quant / n, l_global / n, l_local / n
    total = l_quant + cfg.lambda_global * l_global + cfg.lambda_local * l_local
    return DistillReport(total=total, l_quant=l_quant, l_global=l_global, l_local=l_local)
