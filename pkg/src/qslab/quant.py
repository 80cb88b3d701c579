"""Uniform affine quantization with configurable granularity.

All arithmetic is simulated (fake-quant): tensors stay float64 and the
integer grid only shapes the rounding error.  Rounding is half-to-even
everywhere for cross-platform determinism.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import as_matrix, check_finite, frobenius, spectral_norm

SCALE_FLOOR = 1e-12


class Granularity(str, enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"  # one group per column
    PER_TOKEN = "per_token"      # one group per row


@dataclass(frozen=True)
class QuantParams:
    """Scales and zero-points for one tensor: 1, cols, or rows groups."""

    bits: int
    granularity: Granularity
    scales: np.ndarray
    zero_points: np.ndarray

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ParameterError(f"bits must be in [2, 16], got {self.bits}")
        object.__setattr__(self, "scales", np.atleast_1d(np.asarray(self.scales, dtype=np.float64)))
        object.__setattr__(self, "zero_points", np.atleast_1d(np.asarray(self.zero_points, dtype=np.int64)))
        if self.scales.shape != self.zero_points.shape:
            raise ShapeError("scales and zero_points must have identical shape")
        if (self.scales <= 0).any():
            raise ParameterError("every scale must be positive")
        if (self.zero_points < 0).any() or (self.zero_points > self.qmax).any():
            raise ParameterError(f"zero_points must be in [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    def groups_for(self, shape: tuple[int, int]) -> int:
        if self.granularity is Granularity.PER_TENSOR:
            return 1
        if self.granularity is Granularity.PER_CHANNEL:
            return shape[1]
        return shape[0]

    def broadcast(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Return (scales, zero_points) shaped to broadcast against ``shape``."""
        n = self.groups_for(shape)
        if len(self.scales) != n:
            raise ShapeError(
                f"{self.granularity.value} params carry {len(self.scales)} groups, "
                f"matrix of shape {shape} needs {n}"
            )
        if self.granularity is Granularity.PER_TENSOR:
            return self.scales[0], self.zero_points[0]
        if self.granularity is Granularity.PER_CHANNEL:
            return self.scales[None, :], self.zero_points[None, :]
        return self.scales[:, None], self.zero_points[:, None]

    def to_json(self) -> dict:
        return {
            "bits": self.bits,
            "granularity": self.granularity.value,
            "scales": self.scales.tolist(),
            "zero_points": self.zero_points.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QuantParams":
        return cls(
            bits=int(obj["bits"]),
            granularity=Granularity(obj["granularity"]),
            scales=np.asarray(obj["scales"], dtype=np.float64),
            zero_points=np.asarray(obj["zero_points"], dtype=np.int64),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text: str) -> "QuantParams":
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class IntMatrix:
    """Integer codes in [0, 2^bits - 1] plus the params that produced them."""

    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        qmax = self.params.qmax
        if (self.codes < 0).any() or (self.codes > qmax).any():
            raise ParameterError(f"codes must lie in [0, {qmax}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def _group_minmax(x: np.ndarray, granularity: Granularity) -> tuple[np.ndarray, np.ndarray]:
    if granularity is Granularity.PER_TENSOR:
        return np.array([x.min()]), np.array([x.max()])
    axis = 0 if granularity is Granularity.PER_CHANNEL else 1
    return x.min(axis=axis), x.max(axis=axis)


def calibrate_minmax(x, bits: int, granularity: Granularity) -> QuantParams:
    """Min-max parameter initialization.

    The range is extended to include zero so that a constant group round-trips
    exactly (the constant lands on a grid endpoint); an all-zero group falls
    back to the 1e-12 scale floor.
    """
    x = as_matrix(x, "x")
    check_finite(x, "x")
    if not 2 <= bits <= 16:
        raise ParameterError(f"bits must be in [2, 16], got {bits}")
    lo, hi = _group_minmax(x, granularity)
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    qmax = (1 << bits) - 1
    scales = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
    zps = np.clip(np.round(-lo / scales), 0, qmax).astype(np.int64)
    return QuantParams(bits=bits, granularity=granularity, scales=scales, zero_points=zps)


def quantize(x, p: QuantParams) -> IntMatrix:
    """Map to integer codes: clip(round(x/s) + z, 0, 2^bits - 1)."""
    x = as_matrix(x, "x")
    s, z = p.broadcast(x.shape)
    codes = np.clip(np.round(x / s) + z, 0, p.qmax).astype(np.int64)
    return IntMatrix(codes=codes, params=p)


def dequantize(q: IntMatrix) -> np.ndarray:
    """Back to floats: s * (codes - z)."""
    s, z = q.params.broadcast(q.shape)
    return (q.codes - z) * s


def fake_quant(x, p: QuantParams) -> np.ndarray:
    """quantize-then-dequantize; idempotent on its own output."""
    return dequantize(quantize(x, p))


def recon_loss(x, p: QuantParams) -> float:
    """Sum of squared reconstruction errors over the whole tensor."""
    x = as_matrix(x, "x")
    d = x - fake_quant(x, p)
    return float(np.sum(d * d))


def elementwise_error_bound(p: QuantParams) -> float:
    """Worst-case per-element dequantization error in the unclipped regime."""
    return float(np.max(p.scales)) / 2.0


def qk_noise(q, k, pq: QuantParams, pk: QuantParams) -> tuple[np.ndarray, float]:
    """Perturbation of the query-key product under fake quantization.

    Returns (epsilon, delta_bound) where epsilon = q_hat @ k_hat.T - q @ k.T
    and delta_bound is the analytic triangle-inequality bound built from the
    per-element s/2 error bound and power-iteration spectral norms:

        ||E_q||_F ||k||_2 + ||q||_2 ||E_k||_F + ||E_q||_F ||E_k||_F,
        ||E||_F <= sqrt(rows * cols) * max(s) / 2.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q and k must share the inner dimension: {q.shape} vs {k.shape}")
    q_hat = fake_quant(q, pq)
    k_hat = fake_quant(k, pk)
    epsilon = q_hat @ k_hat.T - q @ k.T
    eq = np.sqrt(q.size) * elementwise_error_bound(pq)
    ek = np.sqrt(k.size) * elementwise_error_bound(pk)
    delta = eq * spectral_norm(k) + spectral_norm(q) * ek + eq * ek
    return epsilon, float(delta)


def noise_norm(epsilon) -> float:
    return frobenius(epsilon)
