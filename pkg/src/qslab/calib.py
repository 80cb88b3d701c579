"""Block-wise post-training calibration of quantizer parameters.

A toy single-head attention block (four projections, optional fixed
orthogonal input rotation) is paired with a fake-quantized twin.  Gradient
descent tunes per-output-channel weight step sizes and per-input-channel
equalization scales against the combined distillation objective; token-wise
activation quantizers stay dynamic (recomputed min-max at every call).

Gradient convention (straight-through): integer codes are held constant
inside the chain rule, so the step-size gradient is the exact local
derivative away from rounding boundaries; the value path passes gradients
through unchanged inside the clip range and blocks them outside.  The numpy
objective in `distill` stays torch-free so finite differences of it remain
an independent oracle for these gradients.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import SparsityMask, full_attention, sparse_attention, AttentionInputs
from .distill import DistillConfig, DistillReport, salient_queries
from .errors import CalibrationDivergenceError, ParameterError, ShapeError
from .numerics import as_matrix, avg_pool_rows, row_softmax
from .quant import SCALE_FLOOR, Granularity, QuantParams, calibrate_minmax, fake_quant

PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ToyBlock:
    """Single-head attention block: X -> softmax(QK^T/sqrt(d)) V -> W_o."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    h: np.ndarray | None = None

    def __post_init__(self):
        shapes = {w.shape for w in (self.w_q, self.w_k, self.w_v, self.w_o)}
        if len(shapes) != 1:
            raise ShapeError(f"projection shapes differ: {shapes}")
        if self.h is not None:
            h = as_matrix(self.h, "h")
            if h.shape != (self.d_in, self.d_in):
                raise ShapeError(f"rotation must be {self.d_in}x{self.d_in}, got {h.shape}")
            if np.max(np.abs(h.T @ h - np.eye(self.d_in))) > 1e-8:
                raise ParameterError("rotation matrix is not orthogonal within 1e-8")

    @property
    def d_out(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_q.shape[1]


def make_toy_block(d_in: int, d_out: int, seed: int, rotation: bool = False) -> ToyBlock:
    """Gaussian-initialized block; the optional rotation is fixed, not learned."""
    from .numerics import random_orthogonal

    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d_in)
    w = [rng.standard_normal((d_out, d_in)) * scale for _ in range(4)]
    h = random_orthogonal(d_in, seed + 1) if rotation else None
    return ToyBlock(w_q=w[0], w_k=w[1], w_v=w[2], w_o=w[3], h=h)


@dataclass(frozen=True)
class BlockQuant:
    """Quantization state of a block: learned weight params + equalization.

    weight_params maps projection name -> QuantParams for the equalized
    weight operand (transposed for q/k/v, direct for o).  When None, min-max
    params are derived on the fly.  Activations are quantized dynamically per
    token at ``abits``; ``abits=None`` disables activation quantization
    (weight-only mode, used by the gradient-fidelity oracle where a staircase
    between parameter and loss would make the local derivative vanish).
    """

    wbits: int = 4
    abits: int | None = 8
    weight_params: dict | None = None
    equalization: dict | None = None

    def eq_vector(self, name: str, size: int) -> np.ndarray:
        if self.equalization is None or name not in self.equalization:
            return np.ones(size)
        return np.asarray(self.equalization[name], dtype=np.float64)


@dataclass(frozen=True)
class QuantizedBlock:
    """A block paired with its quantization state (the fake-quantized twin)."""

    block: ToyBlock
    quant: BlockQuant


class LrDecay(str, enum.Enum):
    COSINE = "cosine"
    CONSTANT = "constant"


@dataclass(frozen=True)
class CalibSchedule:
    """Epochs, sample count, and the two learning rates."""

    epochs: int = 15
    samples: int = 20
    lr_scale: float = 5e-3   # per-channel equalization scales
    lr_affine: float = 5e-2  # quantizer step sizes
    lr_decay: LrDecay = LrDecay.COSINE

    def __post_init__(self):
        if self.epochs < 1 or self.samples < 1:
            raise ParameterError("epochs and samples must be >= 1")
        if self.lr_scale <= 0 or self.lr_affine <= 0:
            raise ParameterError("learning rates must be positive")


@dataclass(frozen=True)
class ForwardDetails:
    """Intermediates of one block forward used by losses and the harness."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a_full: np.ndarray
    a_used: np.ndarray
    attn_out: np.ndarray
    out: np.ndarray


def _weight_operand(block: ToyBlock, name: str, eq: np.ndarray) -> np.ndarray:
    """Equalized, rotated weight as the matmul right operand."""
    w = getattr(block, f"w_{name}")
    if name == "o":
        return w * eq[:, None]
    if block.h is not None:
        w = w @ block.h
    return (w * eq[None, :]).T


def _act_quant(x: np.ndarray, abits: int | None) -> np.ndarray:
    if abits is None:
        return x
    return fake_quant(x, calibrate_minmax(x, abits, Granularity.PER_TOKEN))


def _proj_weight_fq(block: ToyBlock, name: str, quant: BlockQuant) -> np.ndarray:
    wt = _weight_operand(block, name, quant.eq_vector(name, wt_eq_size(block, name)))
    if quant.weight_params is not None and name in quant.weight_params:
        return fake_quant(wt, quant.weight_params[name])
    return fake_quant(wt, calibrate_minmax(wt, quant.wbits, Granularity.PER_CHANNEL))


def wt_eq_size(block: ToyBlock, name: str) -> int:
    return block.d_out if name == "o" else block.d_in


def forward_details(block: ToyBlock, x, mask: SparsityMask | None = None,
                    quant: BlockQuant | None = None) -> ForwardDetails:
    """Run the block, exposing Q/K/V, both attention maps, and the output."""
    x = as_matrix(x, "x")
    if x.shape[1] != block.d_in:
        raise ShapeError(f"x has {x.shape[1]} columns, block expects {block.d_in}")
    xr = x @ block.h if block.h is not None else x

    proj = {}
    for name in ("q", "k", "v"):
        if quant is None:
            proj[name] = xr @ _weight_operand(block, name, np.ones(block.d_in))
        else:
            eq = quant.eq_vector(name, block.d_in)
            proj[name] = _act_quant(xr / eq, quant.abits) @ _proj_weight_fq(block, name, quant)

    inputs = AttentionInputs(q=proj["q"], k=proj["k"], v=proj["v"])
    a_full, _ = full_attention(inputs)
    if mask is not None:
        a_used, attn_out = sparse_attention(inputs, mask)
    else:
        a_used, attn_out = a_full, a_full @ proj["v"]

    if quant is None:
        out = attn_out @ block.w_o
    else:
        eq_o = quant.eq_vector("o", block.d_out)
        out = _act_quant(attn_out / eq_o, quant.abits) @ _proj_weight_fq(block, "o", quant)
    return ForwardDetails(q=proj["q"], k=proj["k"], v=proj["v"], a_full=a_full,
                          a_used=a_used, attn_out=attn_out, out=out)


def forward_block(block: ToyBlock, x, mask: SparsityMask | None = None,
                  quant: BlockQuant | None = None) -> np.ndarray:
    """Block output only (projections, optional rotation/quant, attention, W_o)."""
    return forward_details(block, x, mask=mask, quant=quant).out


# ---------------------------------------------------------------------------
# Torch twin: straight-through fake quantization and the training objective
# ---------------------------------------------------------------------------

def fake_quant_ste(x: torch.Tensor, s: torch.Tensor, z: torch.Tensor, qmax: int) -> torch.Tensor:
    """Fake quantization with straight-through gradients.

    Codes are computed from detached values and held constant in the chain
    rule, so d(out)/d(s) = code - z exactly; the value path has unit gradient
    inside the clip range and zero outside.  ``s`` may be a learnable leaf or
    a differentiable dynamic scale; ``z`` is treated as a constant.
    """
    with torch.no_grad():
        raw = torch.round(x.detach() / s.detach()) + z.detach()
        code = torch.clamp(raw, 0.0, float(qmax))
        in_range = (raw == code).to(x.dtype)
    return s * (code - z.detach()) + (x - x.detach()) * in_range


def dynamic_token_quant_ste(x: torch.Tensor, bits: int | None) -> torch.Tensor:
    """Per-token min-max fake quant (zero-extended range, differentiable scale)."""
    if bits is None:
        return x
    qmax = (1 << bits) - 1
    lo = torch.clamp(torch.amin(x, dim=-1, keepdim=True), max=0.0)
    hi = torch.clamp(torch.amax(x, dim=-1, keepdim=True), min=0.0)
    s = torch.clamp((hi - lo) / qmax, min=SCALE_FLOOR)
    with torch.no_grad():
        z = torch.clamp(torch.round(-lo / s), 0.0, float(qmax))
    return fake_quant_ste(x, s, z, qmax)


def ste_gradient(objective, scale_params: dict) -> dict:
    """Gradients of a torch-built objective w.r.t. named parameter arrays.

    ``objective`` receives a dict of float64 leaf tensors (same keys as
    ``scale_params``) and must return a scalar tensor built from them.
    """
    leaves = {
        name: torch.tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
        for name, v in scale_params.items()
    }
    value = objective(leaves)
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    out = {}
    for (name, leaf), g in zip(leaves.items(), grads):
        out[name] = np.zeros_like(leaf.detach().numpy()) if g is None else g.detach().numpy().copy()
    return out


def _pool_matrix(rows: int, stride: int) -> np.ndarray:
    """Mean-pooling as a matrix so the torch twin pools by matmul."""
    out_rows = -(-rows // stride)
    p = np.zeros((out_rows, rows))
    for i in range(out_rows):
        lo, hi = i * stride, min((i + 1) * stride, rows)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


class _CalibProblem:
    """Differentiable twin of the quantized block over a calibration batch."""

    def __init__(self, block: ToyBlock, cfg: DistillConfig, data, mask, wbits: int,
                 abits: int, mask_in_calib: bool):
        self.block = block
        self.cfg = cfg
        self.wbits = wbits
        self.abits = abits
        self.mask = mask if mask_in_calib else None
        t64 = lambda a: torch.tensor(np.asarray(a, dtype=np.float64))

        xs = np.stack([as_matrix(x) for x in data])
        seq_len = xs.shape[1]
        self.x = t64(xs if block.h is None else xs @ block.h)
        self.mask_bits = None if self.mask is None else torch.tensor(self.mask.bits)
        self.pool = t64(_pool_matrix(seq_len, cfg.stride))
        self.attn_scale = 1.0 / math.sqrt(block.d_out)

        # frozen references from the full-precision block
        fp_out, fp_global, fp_local, salient = [], [], [], []
        k = min(cfg.salient_k, seq_len)
        for x in xs:
            det = forward_details(block, x, mask=self.mask, quant=None)
            fp_out.append(det.out)
            pq, pk = avg_pool_rows(det.q, cfg.stride), avg_pool_rows(det.k, cfg.stride)
            fp_global.append(row_softmax(pq @ pk.T * self.attn_scale))
            idx = salient_queries(det.a_full, k)
            salient.append(idx)
            fp_local.append(row_softmax(det.q[idx] @ det.k.T * self.attn_scale))
        self.fp_out = t64(np.stack(fp_out))
        self.fp_global = t64(np.stack(fp_global))
        self.fp_local = t64(np.stack(fp_local))
        self.salient = torch.tensor(np.stack(salient), dtype=torch.int64)
        self.batch_idx = torch.arange(len(xs))[:, None]

        # constants and learnables per projection
        self.w_operand, self.zero_points, self.scales, self.eq = {}, {}, {}, {}
        for name in PROJECTIONS:
            wt = _weight_operand(block, name, np.ones(wt_eq_size(block, name)))
            params = calibrate_minmax(wt, wbits, Granularity.PER_CHANNEL)
            self.w_operand[name] = t64(wt)
            self.zero_points[name] = t64(params.zero_points[None, :].astype(np.float64))
            self.scales[name] = torch.tensor(params.scales.copy(), requires_grad=True)
            self.eq[name] = torch.ones(wt_eq_size(block, name), dtype=torch.float64,
                                       requires_grad=True)

    def _projection(self, name: str, scale: torch.Tensor, eq: torch.Tensor) -> torch.Tensor:
        xq = dynamic_token_quant_ste(self.x / eq, self.abits)
        wq = fake_quant_ste(self.w_operand[name] * eq[:, None], scale[None, :],
                            self.zero_points[name], (1 << self.wbits) - 1)
        return xq @ wq

    def objective_at(self, scales: dict, eqs: dict) -> tuple[torch.Tensor, dict]:
        """Objective as a function of explicit raw scale / equalization tensors."""
        q, k, v = (self._projection(n, scales[n], eqs[n]) for n in ("q", "k", "v"))
        logits = q @ k.transpose(-1, -2) * self.attn_scale
        full = torch.softmax(logits, dim=-1)
        if self.mask_bits is not None:
            used = torch.softmax(logits.masked_fill(~self.mask_bits, -torch.inf), dim=-1)
        else:
            used = full
        attn = used @ v

        attn_q = dynamic_token_quant_ste(attn / eqs["o"], self.abits)
        wo = fake_quant_ste(self.w_operand["o"] * eqs["o"][:, None], scales["o"][None, :],
                            self.zero_points["o"], (1 << self.wbits) - 1)
        out = attn_q @ wo

        l_quant = torch.mean((out - self.fp_out) ** 2)
        pq, pk = self.pool @ q, self.pool @ k
        a_global = torch.softmax(pq @ pk.transpose(-1, -2) * self.attn_scale, dim=-1)
        l_global = torch.mean((a_global - self.fp_global) ** 2)
        q_sel = q[self.batch_idx, self.salient]
        a_local = torch.softmax(q_sel @ k.transpose(-1, -2) * self.attn_scale, dim=-1)
        l_local = torch.mean((a_local - self.fp_local) ** 2)

        total = l_quant + self.cfg.lambda_global * l_global + self.cfg.lambda_local * l_local
        terms = {"l_quant": float(l_quant.detach()), "l_global": float(l_global.detach()),
                 "l_local": float(l_local.detach())}
        return total, terms

    def objective(self) -> tuple[torch.Tensor, dict]:
        return self.objective_at(self.scales, self.eq)

    def snapshot(self) -> BlockQuant:
        """Freeze current learnables into a BlockQuant usable by the numpy path."""
        weight_params, equalization = {}, {}
        for name in PROJECTIONS:
            scales = np.maximum(self.scales[name].detach().numpy().copy(), SCALE_FLOOR)
            zps = self.zero_points[name].detach().numpy().ravel().astype(np.int64)
            weight_params[name] = QuantParams(bits=self.wbits, granularity=Granularity.PER_CHANNEL,
                                              scales=scales, zero_points=zps)
            equalization[name] = self.eq[name].detach().numpy().copy()
        return BlockQuant(wbits=self.wbits, abits=self.abits,
                          weight_params=weight_params, equalization=equalization)


def build_calib_problem(block: ToyBlock, cfg: DistillConfig, data, mask,
                        wbits: int = 4, abits: int = 8,
                        mask_in_calib: bool = True) -> _CalibProblem:
    """Differentiable objective builder, also used by gradient-fidelity tests."""
    return _CalibProblem(block, cfg, data, mask, wbits, abits, mask_in_calib)


@dataclass
class CalibResult:
    """Calibrated quantization state plus the optimization record."""

    quant: BlockQuant
    loss_trace: list[float]
    term_traces: dict
    final_report: DistillReport
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "wbits": self.quant.wbits,
            "abits": self.quant.abits,
            "weight_params": {k: v.to_json() for k, v in self.quant.weight_params.items()},
            "equalization": {k: np.asarray(v).tolist() for k, v in self.quant.equalization.items()},
            "loss_trace": self.loss_trace,
            "term_traces": self.term_traces,
            "final_report": {
                "total": self.final_report.total,
                "l_quant": self.final_report.l_quant,
                "l_global": self.final_report.l_global,
                "l_local": self.final_report.l_local,
            },
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CalibResult":
        quant = BlockQuant(
            wbits=int(obj["wbits"]),
            abits=int(obj["abits"]),
            weight_params={k: QuantParams.from_json(v) for k, v in obj["weight_params"].items()},
            equalization={k: np.asarray(v, dtype=np.float64) for k, v in obj["equalization"].items()},
        )
        rep = obj["final_report"]
        return cls(quant=quant, loss_trace=list(obj["loss_trace"]),
                   term_traces=obj["term_traces"],
                   final_report=DistillReport(total=rep["total"], l_quant=rep["l_quant"],
                                              l_global=rep["l_global"], l_local=rep["l_local"]),
                   meta=obj.get("meta", {}))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "CalibResult":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def write_loss_csv(self, path: str) -> None:
        """Per-term loss trace columns: iter, l_quant, l_global, l_local, total."""
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "l_quant", "l_global", "l_local", "total"])
            for i, total in enumerate(self.loss_trace):
                writer.writerow([i, repr(self.term_traces["l_quant"][i]),
                                 repr(self.term_traces["l_global"][i]),
                                 repr(self.term_traces["l_local"][i]), repr(total)])


def check_divergence(trace: list[float], initial: float) -> None:
    """Raise once the loss exceeds 10x the initial value 3 epochs in a row."""
    if len(trace) >= 3 and all(v > 10.0 * initial for v in trace[-3:]):
        raise CalibrationDivergenceError(
            f"loss exceeded 10x initial ({initial:.3e}) for 3 consecutive epochs", trace
        )


def calibrate_block(block: ToyBlock, sched: CalibSchedule, cfg: DistillConfig, data,
                    mask: SparsityMask, wbits: int = 4, abits: int = 8,
                    mask_in_calib: bool = True) -> CalibResult:
    """Tune weight step sizes and equalization scales against the objective.

    Starts from min-max initialization, runs full-batch steps with decoupled
    momentum updates (weight decay 0) and optional cosine decay, and returns
    the best parameters seen, so the reported final objective never exceeds
    the initial one.
    """
    if len(data) != sched.samples:
        raise ParameterError(f"data must contain sched.samples={sched.samples} matrices, "
                             f"got {len(data)}")
    problem = _CalibProblem(block, cfg, data, mask, wbits, abits, mask_in_calib)
    groups = [
        {"params": [problem.scales[n] for n in PROJECTIONS], "lr": sched.lr_affine},
        {"params": [problem.eq[n] for n in PROJECTIONS], "lr": sched.lr_scale},
    ]
    opt = torch.optim.SGD(groups, momentum=0.9, weight_decay=0.0)
    scheduler = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=sched.epochs)
                 if sched.lr_decay is LrDecay.COSINE else None)
    # cap each group's per-step move at 0.25% of its initial parameter norm;
    # uncapped first steps overshoot jagged minima and never recover
    caps = []
    for group in groups:
        pnorm = math.sqrt(sum(float((p.detach() ** 2).sum()) for p in group["params"]))
        caps.append((group["params"], 0.0025 * max(pnorm, 1e-12) / group["lr"]))

    trace: list[float] = []
    terms = {"l_quant": [], "l_global": [], "l_local": []}
    best_val, best_quant, best_terms = math.inf, None, None
    for _ in range(sched.epochs):
        total, term_vals = problem.objective()
        value = float(total.detach())
        trace.append(value)
        for key in terms:
            terms[key].append(term_vals[key])
        if value < best_val:
            best_val, best_quant, best_terms = value, problem.snapshot(), term_vals
        check_divergence(trace, trace[0])
        opt.zero_grad()
        total.backward()
        for params, cap in caps:
            torch.nn.utils.clip_grad_norm_(params, cap)
        opt.step()
        if scheduler is not None:
            scheduler.step()
        with torch.no_grad():
            for name in PROJECTIONS:
                problem.scales[name].clamp_(min=SCALE_FLOOR)
                problem.eq[name].clamp_(min=1e-6)

    final_total, final_terms = problem.objective()
    if float(final_total.detach()) < best_val:
        best_val = float(final_total.detach())
        best_quant, best_terms = problem.snapshot(), final_terms

    report = DistillReport(total=best_val, l_quant=best_terms["l_quant"],
                           l_global=best_terms["l_global"], l_local=best_terms["l_local"])
    meta = {
        "wbits": wbits, "abits": abits, "epochs": sched.epochs,
        "samples": sched.samples, "mask_in_calib": mask_in_calib,
        "mask_density": mask.density, "rotation": block.h is not None,
        "rotation_learned": False,
        "quantized_tensors": "q/k/v/output projections and their input activations",
        "lambda_global": cfg.lambda_global, "lambda_local": cfg.lambda_local,
    }
    return CalibResult(quant=best_quant, loss_trace=trace, term_traces=terms,
                       final_report=report, meta=meta)
