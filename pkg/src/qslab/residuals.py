"""Cached residual corrections for quantized sparse attention.

The first-order correction reuses the full-vs-sparse residual from a
reference step.  The second-order correction additionally caches the
difference of two consecutive reference residuals, optionally projected onto
its leading singular directions, which tracks slow temporal drift.  Both
corrections collapse into a single precomputed matrix, so the inference
footprint never exceeds one cached matrix regardless of order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import as_matrix, frobenius, svd, truncate_rank


@dataclass(frozen=True)
class ResidualCache:
    """Reference residual, truncated drift term, and their precomputed sum."""

    delta_ref: np.ndarray
    second_term: np.ndarray
    combined: np.ndarray
    t_ref: int
    t_ref_prev: int
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"rank must be >= 1, got {self.rank}")
        if not (self.delta_ref.shape == self.second_term.shape == self.combined.shape):
            raise ShapeError("cache matrices must share one shape")

    def deployed_payload(self) -> np.ndarray:
        """The single matrix actually carried between refreshes."""
        return self.combined


@dataclass(frozen=True)
class RefreshPlan:
    """Full-attention schedule: refresh steps plus per-refresh reference pairs.

    ``pair_steps`` are the steps immediately after each refresh; second-order
    modes compute full attention there too so the cached drift term comes
    from two consecutive steps.
    """

    total_steps: int
    interval: int
    refresh_steps: tuple[int, ...]
    pair_steps: tuple[int, ...]

    def corrected_steps(self) -> list[int]:
        """Steps where every mode applies its correction (shared across modes)."""
        skip = set(self.refresh_steps) | set(self.pair_steps)
        return [t for t in range(self.total_steps) if t not in skip]

    def full_steps(self, second_order: bool) -> set[int]:
        """Steps where a mode computes full attention."""
        steps = set(self.refresh_steps)
        if second_order:
            steps |= set(self.pair_steps)
        return steps

    def cost_fraction(self, density: float, second_order: bool) -> float:
        """Attention-FLOPs fraction relative to dense every-step attention."""
        full = len(self.full_steps(second_order))
        return (full + (self.total_steps - full) * density) / self.total_steps


def make_refresh_plan(total: int, interval: int) -> RefreshPlan:
    """Fixed-interval schedule: refresh at {0, interval, 2*interval, ...}."""
    if interval < 2:
        raise ParameterError(f"interval must be >= 2, got {interval}")
    if total < interval:
        raise ParameterError(f"total must be >= interval, got {total} < {interval}")
    refresh = tuple(range(0, total, interval))
    pairs = tuple(r + 1 for r in refresh if r + 1 < total)
    return RefreshPlan(total_steps=total, interval=interval, refresh_steps=refresh, pair_steps=pairs)


def residual(a_full, a_sq) -> np.ndarray:
    """Elementwise gap between full attention and its quantized sparse version."""
    a_full = as_matrix(a_full, "a_full")
    a_sq = as_matrix(a_sq, "a_sq")
    if a_full.shape != a_sq.shape:
        raise ShapeError(f"shapes differ: {a_full.shape} vs {a_sq.shape}")
    return a_full - a_sq


def first_order_build(a_full_ref, a_sq_ref, t_ref: int = 0) -> ResidualCache:
    """Cache holding only the reference residual (zero drift term)."""
    delta = residual(a_full_ref, a_sq_ref)
    zero = np.zeros_like(delta)
    return ResidualCache(delta_ref=delta, second_term=zero, combined=delta.copy(),
                         t_ref=t_ref, t_ref_prev=t_ref, rank=1)


def first_order_apply(a_sq_t, cache: ResidualCache) -> np.ndarray:
    """Add the cached reference residual (drift term ignored)."""
    a_sq_t = as_matrix(a_sq_t, "a_sq_t")
    if a_sq_t.shape != cache.delta_ref.shape:
        raise ShapeError(f"shapes differ: {a_sq_t.shape} vs {cache.delta_ref.shape}")
    return a_sq_t + cache.delta_ref


def second_order_build(a_full_ref, a_sq_ref, a_full_prev, a_sq_prev, rank: int,
                       t_ref: int = 1, t_ref_prev: int = 0) -> ResidualCache:
    """Cache from a reference pair: residual at t_ref plus truncated drift.

    The drift term is the difference of the two reference residuals projected
    onto its ``rank`` leading singular directions.
    """
    delta_ref = residual(a_full_ref, a_sq_ref)
    delta_prev = residual(a_full_prev, a_sq_prev)
    if delta_ref.shape != delta_prev.shape:
        raise ShapeError("reference pair matrices must share one shape")
    if not 1 <= rank <= min(delta_ref.shape):
        raise ParameterError(f"rank must be in [1, {min(delta_ref.shape)}], got {rank}")
    raw_second = delta_ref - delta_prev
    second = truncate_rank(svd(raw_second), rank)
    return ResidualCache(delta_ref=delta_ref, second_term=second,
                         combined=delta_ref + second, t_ref=t_ref,
                         t_ref_prev=t_ref_prev, rank=rank)


def second_order_apply(a_sq_t, cache: ResidualCache) -> np.ndarray:
    """Add the precomputed combined correction (residual + drift term)."""
    a_sq_t = as_matrix(a_sq_t, "a_sq_t")
    if a_sq_t.shape != cache.combined.shape:
        raise ShapeError(f"shapes differ: {a_sq_t.shape} vs {cache.combined.shape}")
    return a_sq_t + cache.combined


def compare_correction_errors(full_series, sq_series, tau: int) -> tuple[float, float]:
    """Mean second-order vs first-order correction error over tau-step windows.

    Uses the exact algebraic identities: with a cache anchored at t_ref, the
    first-order error at t is ||delta(t) - delta(t_ref)||_F and the
    second-order error is ||dhat(t) - dhat(t_ref)||_F, where dhat is the
    consecutive-step residual difference.  Averages over every reference step
    and every t within (t_ref, t_ref + tau].  Returns (e_second, e_first).
    """
    if tau < 1:
        raise ParameterError(f"tau must be >= 1, got {tau}")
    n = len(full_series)
    if len(sq_series) != n:
        raise ShapeError("series lengths differ")
    if n < tau + 2:
        raise ParameterError(f"need at least tau+2 = {tau + 2} steps, got {n}")
    deltas = [residual(f, s) for f, s in zip(full_series, sq_series)]
    dhats = [deltas[t] - deltas[t - 1] for t in range(1, n)]  # dhats[t-1] belongs to step t
    e_first, e_second, count = 0.0, 0.0, 0
    for t_ref in range(1, n - 1):
        for t in range(t_ref + 1, min(t_ref + tau, n - 1) + 1):
            e_first += frobenius(deltas[t] - deltas[t_ref])
            e_second += frobenius(dhats[t - 1] - dhats[t_ref - 1])
            count += 1
    return e_second / count, e_first / count


@dataclass(frozen=True)
class SpectrumTable:
    """Per-timestep singular values of the drift term and subspace alignments."""

    timesteps: list[int]
    singular_values: list[np.ndarray]
    leading_alignment: list[float]
    trailing_alignment: list[float]


def _subspace_cos(u_a: np.ndarray, u_b: np.ndarray) -> float:
    """Mean cosine of principal angles between two orthonormal column spans."""
    return float(np.mean(np.linalg.svd(u_a.T @ u_b, compute_uv=False)))


def residual_spectrum(full_series, sq_series, rank: int = 4) -> SpectrumTable:
    """Singular spectrum of the consecutive residual difference at each step.

    Also reports how well the leading (and trailing) rank-``rank`` singular
    subspaces align between consecutive timesteps.
    """
    n = len(full_series)
    if n < 2:
        raise ParameterError("need at least 2 timesteps")
    if len(sq_series) != n:
        raise ShapeError("series lengths differ")
    deltas = [residual(f, s) for f, s in zip(full_series, sq_series)]
    factors = [svd(deltas[t] - deltas[t - 1]) for t in range(1, n)]
    r = max(1, min(rank, min(len(f.s) for f in factors)))
    leading, trailing = [], []
    for a, b in zip(factors[:-1], factors[1:]):
        leading.append(_subspace_cos(a.u[:, :r], b.u[:, :r]))
        trailing.append(_subspace_cos(a.u[:, -r:], b.u[:, -r:]))
    return SpectrumTable(
        timesteps=list(range(1, n)),
        singular_values=[f.s.copy() for f in factors],
        leading_alignment=leading,
        trailing_alignment=trailing,
    )


def export_cache(cache: ResidualCache, out_dir: str) -> tuple[str, str]:
    """Write the deployed payload as a JSON header plus a raw float64 blob."""
    os.makedirs(out_dir, exist_ok=True)
    payload = np.ascontiguousarray(cache.deployed_payload(), dtype="<f8")
    header = {
        "rows": int(payload.shape[0]),
        "cols": int(payload.shape[1]),
        "dtype": "float64-le",
        "order": "row-major",
        "rank": cache.rank,
        "t_ref": cache.t_ref,
        "t_ref_prev": cache.t_ref_prev,
        "fields": ["combined"],
    }
    header_path = os.path.join(out_dir, "cache_header.json")
    blob_path = os.path.join(out_dir, "cache_payload.bin")
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    payload.tofile(blob_path)
    return header_path, blob_path


def load_cache_payload(out_dir: str) -> tuple[dict, np.ndarray]:
    """Read back an exported cache payload for offline inspection."""
    with open(os.path.join(out_dir, "cache_header.json")) as fh:
        header = json.load(fh)
    blob = np.fromfile(os.path.join(out_dir, "cache_payload.bin"), dtype="<f8")
    return header, blob.reshape(header["rows"], header["cols"])
