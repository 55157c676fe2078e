"""Byte-level language model: embedding, stacked LSTM, dropout, linear head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from structdrop.kernels import Scratch, gemm_lhs_colsparse, gemm_lhs_rowsparse, gemm_output_colsparse
from structdrop.lstm import (
    GradientSet,
    LayerState,
    LstmParams,
    Mode,
    StepCache,
    bptt,
    forward_stack,
)
from structdrop.masks import MaskCase, MaskSchedule, StructuredMask, apply_mask, build_schedule
from structdrop.tensor_core import ShapeError, resolve_dtype

MODE_LABELS = ("baseline-nr-random", "nr-st", "nr-rh-st")

_DEFAULT_CASE = {
    "baseline-nr-random": MaskCase.CASE_I,
    "nr-st": MaskCase.CASE_III,
    "nr-rh-st": MaskCase.CASE_III,
}


@dataclass
class ModelConfig:
    vocab: int = 0
    embed_dim: int = 128
    hidden: int = 128
    layers: int = 2
    dropout_nr: float = 0.5
    dropout_rh: Optional[float] = None
    mask_case: Optional[MaskCase] = None
    mode_label: str = "nr-rh-st"

    def __post_init__(self):
        if self.mode_label not in MODE_LABELS:
            raise ValueError(f"mode_label must be one of {MODE_LABELS}, got {self.mode_label!r}")
        case = _DEFAULT_CASE[self.mode_label] if self.mask_case is None else MaskCase.parse(self.mask_case)
        if case.structured != (self.mode_label != "baseline-nr-random"):
            raise ValueError(f"mask case {case.name} is inconsistent with mode {self.mode_label}")
        self.mask_case = case
        if self.mode_label == "nr-rh-st":
            if self.dropout_rh is None:
                self.dropout_rh = self.dropout_nr
        elif self.dropout_rh is not None:
            raise ValueError(f"mode {self.mode_label} has no recurrent dropout; drop dropout_rh")
        for name in ("embed_dim", "hidden", "layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def with_mode(self, mode_label: str) -> "ModelConfig":
        return ModelConfig(self.vocab, self.embed_dim, self.hidden, self.layers, self.dropout_nr,
                           self.dropout_nr if mode_label == "nr-rh-st" else None, None, mode_label)

    def schedule(self, batch: int, steps: int, seed) -> MaskSchedule:
        """Sample the masks for one training window of this model."""
        return build_schedule(self.mask_case, self.layers, steps, self.hidden, self.dropout_nr,
                              self.dropout_rh, seed, input_dim=self.embed_dim, batch=batch)


@dataclass
class ModelParams:
    embedding: np.ndarray
    lstm: list[LstmParams]
    head: np.ndarray
    head_bias: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = [self.embedding]
        for p in self.lstm:
            out += [p.W, p.U, p.b]
        return out + [self.head, self.head_bias]

    @property
    def dtype(self):
        return self.embedding.dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.embedding.copy(),
                           [LstmParams(p.W.copy(), p.U.copy(), p.b.copy()) for p in self.lstm],
                           self.head.copy(), self.head_bias.copy())


class ModelGrads(NamedTuple):
    lstm: list[GradientSet]
    d_embedding: np.ndarray
    d_head: np.ndarray
    d_head_bias: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        """Same order as :meth:`ModelParams.arrays`."""
        out = [self.d_embedding]
        for g in self.lstm:
            out += [g.dW, g.dU, g.db]
        return out + [self.d_head, self.d_head_bias]


def init_params(config: ModelConfig, init_range: float = 0.05, seed=0, dtype=np.float32) -> ModelParams:
    if init_range <= 0:
        raise ValueError("init_range must be positive")
    if config.vocab < 1:
        raise ValueError("config.vocab must be set before initialising parameters")
    dtype = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-init_range, init_range, size=shape).astype(dtype)

    V, E, H = config.vocab, config.embed_dim, config.hidden
    embedding = u(V, E)
    lstm = []
    for l in range(config.layers):
        lstm.append(LstmParams(u(E if l == 0 else H, 4 * H), u(H, 4 * H), u(4 * H)))
    return ModelParams(embedding, lstm, u(H, V), u(V))


def zero_state(config: ModelConfig, batch: int, dtype=np.float32) -> list[LayerState]:
    H = config.hidden
    return [LayerState(np.zeros((batch, H), dtype), np.zeros((batch, H), dtype))
            for _ in range(config.layers)]


@dataclass
class WindowTape:
    tokens: np.ndarray
    lstm: list[list[StepCache]]
    head_in: list[np.ndarray]
    out_masks: list
    schedule: Optional[MaskSchedule]
    mode: str
    scratch: Scratch = field(default_factory=Scratch)


def _check_tokens(tokens: np.ndarray, V: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be B x T, got {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    return tokens


def forward_window(params: ModelParams, config: ModelConfig, tokens, carried: Sequence[LayerState],
                   schedule: Optional[MaskSchedule], mode: Mode = "sparse"):
    """Run one window. ``schedule=None`` disables dropout (evaluation).

    Returns ``(logits, tape, new_carried)`` with one ``B x V`` logits matrix
    per step.
    """
    tokens = _check_tokens(tokens, params.embedding.shape[0])
    B, T = tokens.shape
    if len(carried) != len(params.lstm) or any(s.h.shape != (B, config.hidden) for s in carried):
        raise ShapeError("carried state does not match the batch/model")
    if schedule is not None and schedule.steps != T:
        raise ValueError(f"schedule has {schedule.steps} steps, window has {T}")
    scratch = Scratch()
    inputs = [params.embedding[tokens[:, t]] for t in range(T)]
    tops, lstm_tape, new_state = forward_stack(params.lstm, inputs, carried, schedule, mode, scratch)

    logits, head_in, out_masks = [], [], []
    for t, h in enumerate(tops):
        m = schedule.output(t) if schedule is not None else None
        hd = apply_mask(h, m)
        if mode == "sparse" and isinstance(m, StructuredMask):
            z = gemm_lhs_colsparse(hd, m, params.head, scratch)
        else:
            z = hd @ params.head
        z += params.head_bias
        logits.append(z)
        head_in.append(hd)
        out_masks.append(m)
    tape = WindowTape(tokens, lstm_tape, head_in, out_masks, schedule, mode, scratch)
    return logits, tape, new_state


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(logits: Sequence[np.ndarray], targets) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy (nats) over all B*T positions and its logits gradient."""
    targets = np.asarray(targets)
    T = len(logits)
    if targets.ndim != 2 or targets.shape[1] != T:
        raise ShapeError(f"targets {targets.shape} do not match {T} steps")
    B = targets.shape[0]
    n = B * T
    total = 0.0
    d_logits = []
    rows = np.arange(B)
    for t, z in enumerate(logits):
        if z.shape[0] != B:
            raise ShapeError("logits batch differs from targets")
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        y = targets[:, t]
        total += float(np.sum(lse - shifted[rows, y]))
        d = np.exp(shifted - lse[:, None])
        d[rows, y] -= 1.0
        d /= n
        d_logits.append(d)
    return total / n, d_logits


def backward_window(params: ModelParams, tape: WindowTape, d_logits: Sequence[np.ndarray],
                    schedule: Optional[MaskSchedule] = None, mode: Optional[Mode] = None) -> ModelGrads:
    mode = tape.mode if mode is None else mode
    schedule = tape.schedule if schedule is None else schedule
    if schedule is not tape.schedule:
        raise ValueError("schedule differs from the one used in the forward window")
    T = len(tape.head_in)
    if len(d_logits) != T:
        raise ValueError(f"{len(d_logits)} logit gradients for a {T}-step window")
    scratch = tape.scratch

    d_head = np.zeros_like(params.head)
    d_head_bias = np.zeros_like(params.head_bias)
    d_top = []
    for t in range(T):
        g = d_logits[t]
        m = tape.out_masks[t]
        d_head_bias += g.sum(axis=0)
        if mode == "sparse" and isinstance(m, StructuredMask):
            gemm_lhs_rowsparse(tape.head_in[t].T, m, g, scratch, accumulate_into=d_head)
            d_top.append(gemm_output_colsparse(g, params.head.T, m, scratch))
        else:
            d_head += tape.head_in[t].T @ g
            d_top.append(apply_mask(g @ params.head.T, m))

    lstm_grads, d_inputs = bptt(params.lstm, tape.lstm, d_top, schedule, mode, scratch)
    d_embedding = np.zeros_like(params.embedding)
    for t in range(T):
        np.add.at(d_embedding, tape.tokens[:, t], d_inputs[t])
    return ModelGrads(lstm_grads, d_embedding, d_head, d_head_bias)


def perplexity(loss: float) -> float:
    if loss < 0:
        raise ValueError("cross-entropy must be non-negative")
    return float(np.exp(loss))


# checkpoint layout: magic, then little-endian u32 version, precision code, V, E, H, L,
# then row-major arrays in ModelParams.arrays() order
MAGIC = b"SDLM0001"
CHECKPOINT_VERSION = 1
_PRECISION_CODE = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams) -> None:
    dtype = params.dtype
    V, E = params.embedding.shape
    H = params.lstm[0].hidden
    header = MAGIC + struct.pack("<6I", CHECKPOINT_VERSION, _PRECISION_CODE[dtype], V, E, H, len(params.lstm))
    le = dtype.newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(header)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype=le).tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, code, V, E, H, L = struct.unpack_from("<6I", data, 8)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    dtypes = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
    if code not in dtypes:
        raise CheckpointError(f"{path}: unknown precision code {code}")
    le = dtypes[code]
    offset = 8 + 24

    def read(*shape):
        nonlocal offset
        n = int(np.prod(shape))
        if offset + n * le.itemsize > len(data):
            raise CheckpointError(f"{path}: truncated payload")
        a = np.frombuffer(data, dtype=le, count=n, offset=offset).reshape(shape)
        offset += n * le.itemsize
        return a.astype(le.newbyteorder("="), copy=True)

    embedding = read(V, E)
    lstm = [LstmParams(read(E if l == 0 else H, 4 * H), read(H, 4 * H), read(4 * H)) for l in range(L)]
    head, head_bias = read(H, V), read(V)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return ModelParams(embedding, lstm, head, head_bias)
