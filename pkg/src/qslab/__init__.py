"""Desk-scale lab for joint post-training quantization and sparse attention.

Submodules: numerics (dense linear algebra), quant (uniform affine
quantization), attention (full/sparse attention and masks), distill
(attention-map distillation losses), calib (block-wise calibration),
residuals (cached residual corrections), harness (workloads, pipeline,
sweeps), cli (command line).
"""

from . import attention, calib, cli, distill, errors, harness, numerics, quant, residuals

__all__ = [
    "attention",
    "calib",
    "cli",
    "distill",
    "errors",
    "harness",
    "numerics",
    "quant",
    "residuals",
]

__version__ = "0.1.0"
