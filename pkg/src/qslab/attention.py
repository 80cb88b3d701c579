"""Full and density-controlled sparse attention on single heads.

Masked positions are excluded via a -inf logit sentinel before the softmax,
so pruned pairs get exactly zero probability.  A literal mode that multiplies
logits by the 0/1 mask is kept for side-by-side comparison: it leaves masked
pairs with weight proportional to exp(0), which is why it is not the default.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRowError, ParameterError, ShapeError
from .numerics import as_matrix, frobenius, row_softmax


@dataclass(frozen=True)
class AttentionInputs:
    """Q, K, V of one head (each L x d_k) with the 1/sqrt(d_k) logit scale."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scale: float = field(init=False)

    def __post_init__(self):
        q = as_matrix(self.q, "q")
        k = as_matrix(self.k, "k")
        v = as_matrix(self.v, "v")
        if not (q.shape == k.shape == v.shape):
            raise ShapeError(f"q/k/v must share shape, got {q.shape}/{k.shape}/{v.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "scale", 1.0 / math.sqrt(q.shape[1]))

    @property
    def length(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class SparsityMask:
    """L x L boolean keep-mask; density records the achieved keep fraction."""

    bits: np.ndarray
    density: float

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ShapeError(f"mask must be square, got {bits.shape}")
        if not bits.any(axis=1).all():
            raise DegenerateRowError("every mask row needs at least one kept entry")
        if not 0.0 < self.density <= 1.0:
            raise ParameterError(f"density must be in (0, 1], got {self.density}")
        object.__setattr__(self, "bits", bits)

    @property
    def length(self) -> int:
        return self.bits.shape[0]

    def popcount(self) -> int:
        return int(self.bits.sum())

    def is_subset_of(self, other: "SparsityMask") -> bool:
        return bool((~self.bits | other.bits).all())

    def to_json(self) -> dict:
        """Run-length encoding of the row-major flattened mask."""
        flat = self.bits.ravel()
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        return {
            "rows": int(self.bits.shape[0]),
            "cols": int(self.bits.shape[1]),
            "first": bool(flat[0]),
            "runs": np.diff(bounds).tolist(),
            "density": self.density,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SparsityMask":
        flat = np.empty(obj["rows"] * obj["cols"], dtype=bool)
        value, pos = bool(obj["first"]), 0
        for run in obj["runs"]:
            flat[pos : pos + run] = value
            pos += run
            value = not value
        if pos != flat.size:
            raise ParameterError("run lengths do not cover the mask")
        return cls(bits=flat.reshape(obj["rows"], obj["cols"]), density=float(obj["density"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text: str) -> "SparsityMask":
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class AttentionShiftReport:
    """Frobenius norms of the sparsity / quantization / joint map deviations."""

    delta_sparse: float
    delta_quant: float
    delta_total: float
    interaction: float


def full_attention(inputs: AttentionInputs) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic map A = softmax(Q K^T * scale) and output A @ V."""
    logits = inputs.q @ inputs.k.T * inputs.scale
    a = row_softmax(logits)
    return a, a @ inputs.v


def sparse_attention(
    inputs: AttentionInputs, mask: SparsityMask, literal: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Masked attention; kept positions renormalize, pruned ones are exact zeros.

    ``literal=True`` multiplies logits by the 0/1 mask instead of excluding
    them (comparison mode only).
    """
    if mask.length != inputs.length:
        raise ShapeError(f"mask is {mask.bits.shape}, inputs are length {inputs.length}")
    logits = inputs.q @ inputs.k.T * inputs.scale
    if literal:
        masked = logits * mask.bits
    else:
        masked = np.where(mask.bits, logits, -np.inf)
    a = row_softmax(masked)
    return a, a @ inputs.v


def build_topk_mask(a_ref, density: float) -> SparsityMask:
    """Keep the ceil(density*L) largest reference entries per row, plus the diagonal.

    When the diagonal is not already kept and the row budget allows (k >= 2),
    it replaces the weakest kept entry so the achieved density stays within
    1/L of the target.
    """
    a_ref = as_matrix(a_ref, "a_ref")
    n = a_ref.shape[0]
    if a_ref.shape[1] != n:
        raise ShapeError(f"reference map must be square, got {a_ref.shape}")
    if not 0.0 < density <= 1.0:
        raise ParameterError(f"density must be in (0, 1], got {density}")
    k = math.ceil(density * n)
    bits = np.zeros((n, n), dtype=bool)
    for i in range(n):
        keep = np.argsort(-a_ref[i], kind="stable")[:k]
        if i not in keep:
            if k >= 2:
                keep = keep[:-1]
            keep = np.append(keep, i)
        bits[i, keep] = True
    return SparsityMask(bits=bits, density=bits.sum() / (n * n))


def build_block_mask(n: int, block: int, density: float, seed: int) -> SparsityMask:
    """Diagonal blocks plus uniformly sampled off-diagonal blocks up to ``density``."""
    if n < 1 or block < 1:
        raise ParameterError("n and block must be >= 1")
    if not 0.0 < density <= 1.0:
        raise ParameterError(f"density must be in (0, 1], got {density}")
    nblocks = -(-n // block)
    sizes = [min(block, n - i * block) for i in range(nblocks)]
    floor = sum(s * s for s in sizes) / (n * n)
    if density < floor:
        raise ParameterError(
            f"density {density} is below the block-diagonal floor {floor:.6f}"
        )
    bits = np.zeros((n, n), dtype=bool)
    for i, s in enumerate(sizes):
        r = i * block
        bits[r : r + s, r : r + s] = True
    off = [(i, j) for i in range(nblocks) for j in range(nblocks) if i != j]
    rng = np.random.default_rng(seed)
    rng.shuffle(off)
    target = density * n * n
    for i, j in off:
        if bits.sum() >= target:
            break
        bits[i * block : i * block + sizes[i], j * block : j * block + sizes[j]] = True
    return SparsityMask(bits=bits, density=bits.sum() / (n * n))


def measure_attention_shift(
    inputs_fp: AttentionInputs, inputs_q: AttentionInputs, mask: SparsityMask
) -> AttentionShiftReport:
    """Decompose the attention-map deviation into sparse, quant, and joint parts.

    ``inputs_q`` is the fake-quantized counterpart of ``inputs_fp``; the
    interaction term is |total - sparse - quant|, the empirical analog of the
    cross term that compounds the two error sources.
    """
    if inputs_fp.q.shape != inputs_q.q.shape:
        raise ShapeError("fp and quantized inputs must share shapes")
    a_full_fp, _ = full_attention(inputs_fp)
    a_full_q, _ = full_attention(inputs_q)
    a_sparse_fp, _ = sparse_attention(inputs_fp, mask)
    a_sparse_q, _ = sparse_attention(inputs_q, mask)
    d_sparse = frobenius(a_full_fp - a_sparse_fp)
    d_quant = frobenius(a_full_fp - a_full_q)
    d_total = frobenius(a_full_fp - a_sparse_q)
    return AttentionShiftReport(
        delta_sparse=d_sparse,
        delta_quant=d_quant,
        delta_total=d_total,
        interaction=abs(d_total - d_sparse - d_quant),
    )


def matrix_to_csv(m, path) -> None:
    """Plain numeric CSV dump of one matrix (for external plotting)."""
    m = as_matrix(m)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in m:
            writer.writerow([repr(float(x)) for x in row])
