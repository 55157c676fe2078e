"""Structured-dropout LSTM training with compacted sparse GEMM kernels."""

from structdrop.estimator import StructuredDropoutLM
from structdrop.kernels import (
    SparsityKind,
    flops,
    gemm_lhs_colsparse,
    gemm_lhs_rowsparse,
    gemm_output_colsparse,
)
from structdrop.masks import (
    ElementMask,
    MaskCase,
    MaskSchedule,
    StructuredMask,
    apply_random,
    apply_structured,
    build_schedule,
    sample_structured_mask,
)

__all__ = [
    "ElementMask",
    "MaskCase",
    "MaskSchedule",
    "SparsityKind",
    "StructuredDropoutLM",
    "StructuredMask",
    "apply_random",
    "apply_structured",
    "build_schedule",
    "flops",
    "gemm_lhs_colsparse",
    "gemm_lhs_rowsparse",
    "gemm_output_colsparse",
    "sample_structured_mask",
]

__version__ = "0.1.0"
