"""Compaction-based GEMM kernels for column-structured dropout.

Each kernel gathers the kept columns/rows of its operands into contiguous
buffers, runs one dense GEMM on the smaller problem, and (where the output
is sparse) scatters the result back. The three kernels correspond to the
three places structured dropout shows up during training:

* forward pass: the left operand has zero columns (``gemm_lhs_colsparse``)
* backward pass: the output is going to be masked (``gemm_output_colsparse``)
* weight gradient: the transposed activation has zero rows (``gemm_lhs_rowsparse``)
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Optional

import numpy as np

from structdrop.masks import StructuredMask
from structdrop.tensor_core import ShapeError


class SparsityKind(Enum):
    LhsColumnSparse = "lhs_colsparse"
    OutputColumnSparse = "output_colsparse"
    LhsRowSparse = "lhs_rowsparse"


class Scratch:
    """Reusable flat buffers for compacted operands.

    ``get`` hands out a view of at least the requested size; a buffer only
    grows, so steady-state time steps allocate nothing.
    """

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}

    def get(self, key: str, shape: tuple[int, ...], dtype) -> np.ndarray:
        n = math.prod(shape)
        buf = self._bufs.get(key)
        if buf is None or buf.dtype != dtype or buf.size < n:
            buf = np.empty(n, dtype=dtype)
            self._bufs[key] = buf
        return buf[:n].reshape(shape)


def _take_rows(A: np.ndarray, idx: np.ndarray, scratch: Optional[Scratch], key: str) -> np.ndarray:
    if not A.flags.c_contiguous and A.T.flags.c_contiguous:
        # A is a transposed view: its rows are columns of the base
        return _take_cols(A.T, idx, scratch, key).T
    out = scratch.get(key, (idx.size, A.shape[1]), A.dtype) if scratch else None
    # indices come from a validated mask; 'clip' avoids the buffered out= path
    return np.take(A, idx, axis=0, out=out, mode="clip")


def _take_cols(A: np.ndarray, idx: np.ndarray, scratch: Optional[Scratch], key: str) -> np.ndarray:
    if not A.flags.c_contiguous and A.T.flags.c_contiguous:
        return _take_rows(A.T, idx, scratch, key).T
    out = scratch.get(key, (A.shape[0], idx.size), A.dtype) if scratch else None
    return np.take(A, idx, axis=1, out=out, mode="clip")


def _check_mask(mask: StructuredMask, H: int) -> None:
    if not isinstance(mask, StructuredMask):
        raise TypeError("compacted kernels need a StructuredMask")
    if mask.width != H:
        raise ShapeError(f"mask width {mask.width} does not match dimension {H}")


def gemm_lhs_colsparse(Xm: np.ndarray, mask: StructuredMask, W: np.ndarray,
                       scratch: Optional[Scratch] = None) -> np.ndarray:
    """``Xm @ W`` where ``Xm`` is zero on ``mask.dropped`` columns.

    Only the kept columns of ``Xm`` and kept rows of ``W`` are read.
    """
    if Xm.ndim != 2 or W.ndim != 2 or Xm.shape[1] != W.shape[0]:
        raise ShapeError(f"inner dimensions differ: {Xm.shape} @ {W.shape}")
    _check_mask(mask, W.shape[0])
    if mask.drops_nothing:
        return Xm @ W
    if mask.n_kept == 0:
        return np.zeros((Xm.shape[0], W.shape[1]), dtype=Xm.dtype)
    xc = _take_cols(Xm, mask.kept, scratch, "fp_lhs")
    wc = _take_rows(W, mask.kept, scratch, "fp_rhs")
    return xc @ wc


def gemm_output_colsparse(G: np.ndarray, Wt: np.ndarray, mask: StructuredMask,
                          scratch: Optional[Scratch] = None) -> np.ndarray:
    """``apply_structured(G @ Wt, mask)`` computing only the kept columns.

    The dropout scale is fused in, so the result is the gradient with
    respect to the activation *before* dropout was applied.
    """
    if G.ndim != 2 or Wt.ndim != 2 or G.shape[1] != Wt.shape[0]:
        raise ShapeError(f"inner dimensions differ: {G.shape} @ {Wt.shape}")
    _check_mask(mask, Wt.shape[1])
    scale = G.dtype.type(mask.scale)
    if mask.drops_nothing:
        out = G @ Wt
        if mask.scale != 1.0:
            out *= scale
        return out
    out = np.zeros((G.shape[0], Wt.shape[1]), dtype=G.dtype)
    if mask.n_kept == 0:
        return out
    wc = _take_cols(Wt, mask.kept, scratch, "bp_rhs")
    prod = G @ wc
    prod *= scale
    out[:, mask.kept] = prod
    return out


def gemm_lhs_rowsparse(XmT: np.ndarray, mask: StructuredMask, G: np.ndarray,
                       scratch: Optional[Scratch] = None,
                       accumulate_into: Optional[np.ndarray] = None) -> np.ndarray:
    """``XmT @ G`` where ``XmT`` is zero on ``mask.dropped`` rows.

    With ``accumulate_into`` the kept rows of the product are added into
    that array in place (dropped rows are left untouched) and it is returned.
    """
    if XmT.ndim != 2 or G.ndim != 2 or XmT.shape[1] != G.shape[0]:
        raise ShapeError(f"inner dimensions differ: {XmT.shape} @ {G.shape}")
    _check_mask(mask, XmT.shape[0])
    H, M = XmT.shape[0], G.shape[1]
    if accumulate_into is not None and accumulate_into.shape != (H, M):
        raise ShapeError(f"accumulator {accumulate_into.shape} vs result {(H, M)}")
    if mask.drops_nothing:
        if accumulate_into is None:
            return XmT @ G
        accumulate_into += XmT @ G
        return accumulate_into
    if mask.n_kept == 0:
        return np.zeros((H, M), dtype=G.dtype) if accumulate_into is None else accumulate_into
    xc = _take_rows(XmT, mask.kept, scratch, "wg_lhs")
    prod = xc @ G
    if accumulate_into is None:
        out = np.zeros((H, M), dtype=G.dtype)
        out[mask.kept] = prod
        return out
    accumulate_into[mask.kept] += prod
    return accumulate_into


def flops(kind: SparsityKind, B: int, H: int, M: int,
          mask: Optional[StructuredMask] = None) -> int:
    """Multiply-add count (2 per MAC) of one kernel call.

    ``H`` is the masked dimension. Without a mask the dense count is
    returned; with one, ``H`` is replaced by the kept count.
    """
    kind = SparsityKind(kind)
    k = H if mask is None else mask.n_kept
    if mask is not None and mask.width != H:
        raise ShapeError(f"mask width {mask.width} does not match H={H}")
    # all three compacted GEMMs reduce to B x k x M multiply-adds
    return 2 * B * k * M
