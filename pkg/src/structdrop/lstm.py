"""LSTM cell forward, backward-through-time, and weight gradients.

Gate pre-activations for one step are a single ``B x 4H`` block in the fixed
order ``[i | f | o | g]``; ``W`` is ``H_in x 4H`` and ``U`` is ``H x 4H``.

``mode`` selects how masked GEMMs run. ``"sparse"`` routes every GEMM whose
operand or output is covered by a :class:`StructuredMask` through the
compacted kernels; ``"dense"`` runs the same maths with plain matmuls on the
mask-applied operands. Element-level masks always take the dense path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from structdrop.kernels import (
    Scratch,
    gemm_lhs_colsparse,
    gemm_lhs_rowsparse,
    gemm_output_colsparse,
)
from structdrop.masks import Mask, MaskSchedule, StructuredMask, apply_mask
from structdrop.tensor_core import ShapeError, activation, activation_grad

Mode = Literal["dense", "sparse"]


@dataclass
class LstmParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H4 = self.U.shape[1]
        if H4 % 4 or self.U.shape[0] * 4 != H4:
            raise ShapeError(f"recurrent weights must be H x 4H, got {self.U.shape}")
        if self.W.ndim != 2 or self.W.shape[1] != H4:
            raise ShapeError(f"input weights must be H_in x 4H, got {self.W.shape}")
        if self.b.shape != (H4,):
            raise ShapeError(f"bias must have length 4H={H4}, got {self.b.shape}")

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class StepCache:
    x_dropped: np.ndarray
    h_prev_dropped: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c_t: np.ndarray
    tanh_c_t: np.ndarray
    nr_mask: Optional[Mask]
    rh_mask: Optional[Mask]


@dataclass
class StepGradients:
    d_gates_pre: np.ndarray
    d_h_prev: np.ndarray
    d_c_prev: np.ndarray
    d_x: np.ndarray


@dataclass
class GradientSet:
    dW: np.ndarray
    dU: np.ndarray
    db: np.ndarray

    @classmethod
    def zeros_like(cls, params: LstmParams) -> "GradientSet":
        return cls(np.zeros_like(params.W), np.zeros_like(params.U), np.zeros_like(params.b))


def _use_kernel(mask, mode: Mode) -> bool:
    return mode == "sparse" and isinstance(mask, StructuredMask)


def _project(Xm: np.ndarray, mask, W: np.ndarray, mode: Mode, scratch) -> np.ndarray:
    if _use_kernel(mask, mode):
        return gemm_lhs_colsparse(Xm, mask, W, scratch)
    return Xm @ W


def _backproject(G: np.ndarray, W: np.ndarray, mask, mode: Mode, scratch) -> np.ndarray:
    """Gradient w.r.t. the un-dropped operand of ``apply_mask(X, mask) @ W``."""
    if _use_kernel(mask, mode):
        return gemm_output_colsparse(G, W.T, mask, scratch)
    return apply_mask(G @ W.T, mask)


def _accumulate_wg(acc: np.ndarray, Xm: np.ndarray, mask, G: np.ndarray, mode: Mode, scratch) -> None:
    if _use_kernel(mask, mode):
        gemm_lhs_rowsparse(Xm.T, mask, G, scratch, accumulate_into=acc)
    else:
        acc += Xm.T @ G


def step_forward(params: LstmParams, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
                 nr_mask: Optional[Mask] = None, rh_mask: Optional[Mask] = None,
                 mode: Mode = "sparse", scratch: Optional[Scratch] = None):
    """One cell step. Returns ``(h_t, c_t, cache)``; ``h_t``/``c_t`` are never masked."""
    B = x.shape[0]
    H = params.hidden
    if x.shape != (B, params.input_dim) or h_prev.shape != (B, H) or c_prev.shape != (B, H):
        raise ShapeError(f"step inputs {x.shape}, {h_prev.shape}, {c_prev.shape} "
                         f"do not fit params with H_in={params.input_dim}, H={H}")
    for mask, width in ((nr_mask, params.input_dim), (rh_mask, H)):
        if mask is not None and mask.width != width:
            raise ShapeError(f"mask width {mask.width} does not match {width}")

    xd = apply_mask(x, nr_mask)
    hd = apply_mask(h_prev, rh_mask)
    pre = _project(xd, nr_mask, params.W, mode, scratch)
    pre += _project(hd, rh_mask, params.U, mode, scratch)
    pre += params.b

    # one sigmoid over the contiguous [i | f | o] block
    ifo = activation("sigmoid", pre[:, :3 * H])
    i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
    g = activation("tanh", pre[:, 3 * H:])
    c_t = f * c_prev + i * g
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    cache = StepCache(xd, hd, c_prev, i, f, o, g, c_t, tanh_c, nr_mask, rh_mask)
    return h_t, c_t, cache


def step_backward(params: LstmParams, cache: StepCache, d_h_total: np.ndarray,
                  d_c_next: np.ndarray, mode: Mode = "sparse",
                  scratch: Optional[Scratch] = None) -> StepGradients:
    if d_h_total.shape != cache.c_t.shape or d_c_next.shape != cache.c_t.shape:
        raise ShapeError("incoming gradients do not match the cached step")
    d_o = d_h_total * cache.tanh_c_t
    d_c = d_h_total * cache.o * (1.0 - cache.tanh_c_t * cache.tanh_c_t) + d_c_next
    d_f = d_c * cache.c_prev
    d_c_prev = d_c * cache.f
    d_i = d_c * cache.g
    d_g = d_c * cache.i

    H = d_c.shape[1]
    d_gates = np.empty((d_c.shape[0], 4 * H), dtype=d_c.dtype)
    d_gates[:, :H] = activation_grad("sigmoid", cache.i, d_i)
    d_gates[:, H:2 * H] = activation_grad("sigmoid", cache.f, d_f)
    d_gates[:, 2 * H:3 * H] = activation_grad("sigmoid", cache.o, d_o)
    d_gates[:, 3 * H:] = activation_grad("tanh", cache.g, d_g)

    d_h_prev = _backproject(d_gates, params.U, cache.rh_mask, mode, scratch)
    d_x = _backproject(d_gates, params.W, cache.nr_mask, mode, scratch)
    return StepGradients(d_gates, d_h_prev, d_c_prev, d_x)


def step_weight_grads(cache: StepCache, d_gates_pre: np.ndarray, mode: Mode,
                      accum: GradientSet, scratch: Optional[Scratch] = None) -> GradientSet:
    if d_gates_pre.shape[0] != cache.x_dropped.shape[0] or d_gates_pre.shape[1] != accum.db.size:
        raise ShapeError("gate gradients do not match the accumulator")
    _accumulate_wg(accum.dW, cache.x_dropped, cache.nr_mask, d_gates_pre, mode, scratch)
    _accumulate_wg(accum.dU, cache.h_prev_dropped, cache.rh_mask, d_gates_pre, mode, scratch)
    accum.db += d_gates_pre.sum(axis=0)
    return accum


@dataclass
class LayerState:
    h: np.ndarray
    c: np.ndarray


def forward_stack(layers: Sequence[LstmParams], inputs: Sequence[np.ndarray],
                  state: Sequence[LayerState], schedule: Optional[MaskSchedule],
                  mode: Mode = "sparse", scratch: Optional[Scratch] = None):
    """Run all layers over all steps.

    Returns ``(top_outputs, tape, new_state)`` where ``tape[l][t]`` is the
    :class:`StepCache` of layer ``l`` at step ``t``.
    """
    L = len(layers)
    h = [s.h for s in state]
    c = [s.c for s in state]
    tape: list[list[StepCache]] = [[] for _ in range(L)]
    outputs = []
    for t, x in enumerate(inputs):
        for l, p in enumerate(layers):
            nr = schedule.nr(l, t) if schedule is not None else None
            rh = schedule.rh(l, t) if schedule is not None else None
            h[l], c[l], cache = step_forward(p, x, h[l], c[l], nr, rh, mode, scratch)
            tape[l].append(cache)
            x = h[l]
        outputs.append(x)
    return outputs, tape, [LayerState(hh, cc) for hh, cc in zip(h, c)]


def bptt(layers: Sequence[LstmParams], tape: Sequence[Sequence[StepCache]],
         d_out: Sequence[np.ndarray], schedule: Optional[MaskSchedule] = None,
         mode: Mode = "sparse", scratch: Optional[Scratch] = None):
    """Backpropagate one truncated window.

    ``d_out[t]`` is the gradient arriving at the top layer's ``h_t`` from the
    loss head. Returns ``(grads, d_inputs)``: one :class:`GradientSet` per
    layer and the gradient w.r.t. layer 0's (un-dropped) input at each step.
    The cell-state gradient entering from beyond the window is zero.
    """
    L = len(layers)
    if len(tape) != L:
        raise ValueError(f"tape has {len(tape)} layers, params have {L}")
    T = len(d_out)
    if any(len(steps) != T for steps in tape):
        raise ValueError("tape length does not match d_out")
    if schedule is not None:
        if schedule.layers != L or schedule.steps != T:
            raise ValueError("schedule shape does not match the tape")
        for l in range(L):
            for t in range(T):
                if tape[l][t].nr_mask is not schedule.nr(l, t) or tape[l][t].rh_mask is not schedule.rh(l, t):
                    raise ValueError(f"tape masks at layer {l}, step {t} differ from the schedule")

    grads = [GradientSet.zeros_like(p) for p in layers]
    d_h_rec = [np.zeros_like(tape[l][0].c_t) for l in range(L)]
    d_c = [np.zeros_like(tape[l][0].c_t) for l in range(L)]
    d_inputs: list[np.ndarray] = [None] * T
    for t in range(T - 1, -1, -1):
        d_above = d_out[t]
        for l in range(L - 1, -1, -1):
            cache = tape[l][t]
            sg = step_backward(layers[l], cache, d_above + d_h_rec[l], d_c[l], mode, scratch)
            step_weight_grads(cache, sg.d_gates_pre, mode, grads[l], scratch)
            d_h_rec[l] = sg.d_h_prev
            d_c[l] = sg.d_c_prev
            d_above = sg.d_x
        d_inputs[t] = d_above
    return grads, d_inputs
