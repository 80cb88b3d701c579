"""Dense linear-algebra foundation.

Matrices are plain 2-D float64 ``numpy.ndarray`` in row-major order; vectors
are 1-D arrays.  All functions are pure and hold no state, so they are safe
to call from multiple threads.  Reductions go through numpy/LAPACK with a
fixed loop order, which keeps golden-value tests bit-stable per build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError, NumericalError, ParameterError, ShapeError


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be 2-D and non-empty, got shape {a.shape}")
    return a


def check_finite(m: np.ndarray, name: str = "matrix") -> None:
    if not np.isfinite(m).all():
        raise ParameterError(f"{name} contains NaN/Inf entries")


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD factors with u (m x r), s (r,) nonincreasing, v (n x r)."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.s)


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(logits) -> np.ndarray:
    """Row-wise softmax stabilized by per-row max subtraction.

    Entries may be finite or -inf sentinels; -inf maps to an exact zero.
    A row with no finite entry raises DegenerateRowError.
    """
    m = as_matrix(logits, "logits")
    if np.isnan(m).any() or np.isposinf(m).any():
        raise ParameterError("logits must be finite or -inf sentinels")
    row_max = np.max(m, axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        bad = int(np.where(np.isneginf(row_max))[0][0])
        raise DegenerateRowError(f"row {bad} has no finite entry")
    e = np.exp(m - row_max)
    return e / np.sum(e, axis=1, keepdims=True)


def avg_pool_rows(m, stride: int) -> np.ndarray:
    """Mean-pool consecutive row groups of size ``stride`` (ragged tail kept)."""
    m = as_matrix(m)
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return m.copy()
    rows = m.shape[0]
    out = np.empty((-(-rows // stride), m.shape[1]), dtype=np.float64)
    for i in range(out.shape[0]):
        out[i] = m[i * stride : min((i + 1) * stride, rows)].mean(axis=0)
    return out


def top_k_indices(v, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by lower index first.

    Returned in descending-value order (rank order), deterministically.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if not 1 <= k <= len(v):
        raise ParameterError(f"k must be in [1, {len(v)}], got {k}")
    return np.argsort(-v, kind="stable")[:k]


def svd(m) -> SvdFactors:
    """Thin SVD; u @ diag(s) @ v.T reconstructs m within 1e-6 relative."""
    m = as_matrix(m)
    check_finite(m)
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # LAPACK iteration cap exceeded
        raise NumericalError(f"svd did not converge on shape {m.shape}: {exc}") from exc
    return SvdFactors(u=u, s=s, v=vh.T)


def truncate_rank(f: SvdFactors, r: int) -> np.ndarray:
    """Best rank-r approximation assembled from the leading SVD factors."""
    if not 1 <= r <= len(f.s):
        raise ParameterError(f"rank must be in [1, {len(f.s)}], got {r}")
    return (f.u[:, :r] * f.s[:r]) @ f.v[:, :r].T


def random_orthogonal(dim: int, seed: int) -> np.ndarray:
    """Orthogonal matrix from QR of a seeded Gaussian, sign-fixed for uniqueness."""
    if dim < 1:
        raise ParameterError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # fix column signs so the factorization (hence H) is unique per seed
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def frobenius(m) -> float:
    """Square root of the sum of squared entries."""
    m = as_matrix(m)
    check_finite(m)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm(m, iters: int = 20) -> float:
    """Largest singular value estimated by power iteration on m.T @ m.

    Deterministic: starts from a fixed seeded vector. 20 iterations is
    plenty for the desk-scale matrices handled here.
    """
    m = as_matrix(m)
    check_finite(m)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = m.T @ (m @ v)
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0
        v = w / n
    return float(np.linalg.norm(m @ v))
