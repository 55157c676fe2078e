"""Dropout masks and their per-window schedules.

Two mask shapes are supported. A :class:`StructuredMask` drops whole feature
columns, the same columns for every row of the batch, which is what the
compacted kernels exploit. An :class:`ElementMask` drops individual entries
independently and only ever runs through the dense path.

A schedule decides, for every layer and time step of one truncated-BPTT
window, which mask is used. The four schedule cases combine *within-batch*
structure (random vs structured) with *across-time* behaviour (a fresh mask
per step vs one mask reused for the whole window):

=========  ============  ===========
case       within batch  across time
=========  ============  ===========
I          random        different
II         random        same
III        structured    different
IV         structured    same
=========  ============  ===========
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from structdrop.tensor_core import ShapeError


class InvalidRateError(ValueError):
    pass


def _check_rate(p: float) -> float:
    p = float(p)
    if not (0.0 <= p < 1.0):
        raise InvalidRateError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    return p


def dropped_count(H: int, p: float) -> int:
    """round(p*H) with halves rounded up."""
    return int(math.floor(p * H + 0.5))


@dataclass(frozen=True, eq=False)
class StructuredMask:
    width: int
    dropped: np.ndarray
    kept: np.ndarray
    rate: float
    scale: float

    @classmethod
    def from_dropped(cls, width: int, dropped: Sequence[int], rate: float) -> "StructuredMask":
        rate = _check_rate(rate)
        dropped = np.unique(np.asarray(dropped, dtype=np.intp))
        if dropped.size and (dropped[0] < 0 or dropped[-1] >= width):
            raise IndexError("dropped index out of range")
        keep = np.ones(width, dtype=bool)
        keep[dropped] = False
        kept = np.flatnonzero(keep).astype(np.intp)
        return cls(width, dropped, kept, rate, 1.0 / (1.0 - rate))

    @classmethod
    def identity(cls, width: int) -> "StructuredMask":
        return cls.from_dropped(width, [], 0.0)

    @property
    def n_kept(self) -> int:
        return int(self.kept.size)

    @property
    def drops_nothing(self) -> bool:
        return self.dropped.size == 0

    def indicator(self, dtype=np.float64) -> np.ndarray:
        ind = np.zeros(self.width, dtype=dtype)
        ind[self.kept] = 1
        return ind

    def apply(self, X: np.ndarray) -> np.ndarray:
        return apply_structured(X, self)

    def __eq__(self, other):
        if not isinstance(other, StructuredMask):
            return NotImplemented
        return (self.width == other.width and self.rate == other.rate
                and np.array_equal(self.dropped, other.dropped))

    def __hash__(self):
        return hash((self.width, self.rate, self.dropped.tobytes()))


@dataclass(frozen=True, eq=False)
class ElementMask:
    """Per-element Bernoulli keep mask of a fixed B x width shape."""

    keep: np.ndarray
    rate: float
    scale: float

    @property
    def width(self) -> int:
        return self.keep.shape[1]

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.shape != self.keep.shape:
            raise ShapeError(f"mask shape {self.keep.shape} vs input {X.shape}")
        return np.where(self.keep, X * X.dtype.type(self.scale), X.dtype.type(0))

    def __eq__(self, other):
        if not isinstance(other, ElementMask):
            return NotImplemented
        return self.rate == other.rate and np.array_equal(self.keep, other.keep)

    def __hash__(self):
        return hash((self.rate, self.keep.tobytes()))


Mask = Union[StructuredMask, ElementMask]


def sample_structured_mask(H: int, p: float, rng: np.random.Generator) -> StructuredMask:
    if H < 1:
        raise ValueError("mask width must be >= 1")
    p = _check_rate(p)
    n_drop = dropped_count(H, p)
    dropped = np.sort(rng.choice(H, size=n_drop, replace=False)) if n_drop else []
    return StructuredMask.from_dropped(H, dropped, p)


def sample_element_mask(shape: tuple[int, int], p: float, rng: np.random.Generator) -> ElementMask:
    p = _check_rate(p)
    keep = rng.random(shape) >= p
    return ElementMask(keep, p, 1.0 / (1.0 - p))


def apply_structured(X: np.ndarray, mask: StructuredMask) -> np.ndarray:
    if X.ndim != 2 or X.shape[1] != mask.width:
        raise ShapeError(f"input {X.shape} does not match mask width {mask.width}")
    out = np.zeros_like(X)
    if mask.n_kept:
        out[:, mask.kept] = X[:, mask.kept] * X.dtype.type(mask.scale)
    return out


def apply_random(X: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    return sample_element_mask(X.shape, p, rng).apply(X)


def apply_mask(X: np.ndarray, mask: Optional[Mask]) -> np.ndarray:
    """Apply any mask; ``None`` means no dropout on this path."""
    if mask is None:
        return X
    return mask.apply(X)


class MaskCase(Enum):
    CASE_I = ("random", "different")
    CASE_II = ("random", "same")
    CASE_III = ("structured", "different")
    CASE_IV = ("structured", "same")

    @property
    def within_batch(self) -> str:
        return self.value[0]

    @property
    def across_time(self) -> str:
        return self.value[1]

    @property
    def structured(self) -> bool:
        return self.within_batch == "structured"

    @classmethod
    def parse(cls, value) -> "MaskCase":
        if isinstance(value, MaskCase):
            return value
        key = str(value).upper().replace("-", "_")
        if not key.startswith("CASE_"):
            key = "CASE_" + key
        return cls[key]


# direction codes folded into the per-stream seed
_NR, _RH = 0, 1


@dataclass
class MaskSchedule:
    """Masks for one truncated-BPTT window.

    ``nr_masks[l][t]`` masks the non-recurrent input of layer ``l`` at step
    ``t``. When the schedule was built with ``output_mask=True`` there is one
    extra level, ``nr_masks[layers][t]``, used on the top hidden state just
    before the output projection. ``rh_masks[l][t]`` masks the recurrent
    input of layer ``l`` and is ``None`` when no recurrent dropout is used.
    """

    case: MaskCase
    layers: int
    steps: int
    nr_masks: list[list[Mask]]
    rh_masks: Optional[list[list[Mask]]]
    seed: object
    rates: tuple[float, Optional[float]] = field(default=(0.0, None))

    @property
    def has_output_mask(self) -> bool:
        return len(self.nr_masks) > self.layers

    def nr(self, layer: int, t: int) -> Mask:
        return self.nr_masks[layer][t]

    def rh(self, layer: int, t: int) -> Optional[Mask]:
        if self.rh_masks is None:
            return None
        return self.rh_masks[layer][t]

    def output(self, t: int) -> Optional[Mask]:
        if not self.has_output_mask:
            return None
        return self.nr_masks[self.layers][t]


def _stream(seed, level: int, direction: int) -> np.random.Generator:
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(base + [level, direction])


def _masks_for_stream(case: MaskCase, rng, T, width, p, batch) -> list[Mask]:
    def draw():
        if case.structured:
            return sample_structured_mask(width, p, rng)
        return sample_element_mask((batch, width), p, rng)

    if case.across_time == "same":
        m = draw()
        return [m] * T
    return [draw() for _ in range(T)]


def build_schedule(case, L: int, T: int, H: int, p_nr: float, p_rh: Optional[float] = None,
                   seed=0, *, input_dim: Optional[int] = None, batch: Optional[int] = None,
                   output_mask: bool = True) -> MaskSchedule:
    """Sample every mask for an ``L``-layer, ``T``-step window.

    ``input_dim`` is the width of layer 0's input (defaults to ``H``).
    Random (element-level) cases need ``batch`` to fix the mask shape.
    Each (level, direction) pair draws from its own generator seeded from
    ``seed``, advanced once per step, so the result does not depend on the
    order in which masks are requested later.
    """
    case = MaskCase.parse(case)
    if L < 1 or T < 1 or H < 1:
        raise ValueError("layers, steps and hidden size must be positive")
    p_nr = _check_rate(p_nr)
    if p_rh is not None:
        p_rh = _check_rate(p_rh)
    if not case.structured and (batch is None or batch < 1):
        raise ValueError("random-mask cases need a positive batch size")
    input_dim = H if input_dim is None else input_dim

    n_levels = L + 1 if output_mask else L
    nr_masks = []
    for level in range(n_levels):
        width = input_dim if level == 0 else H
        nr_masks.append(_masks_for_stream(case, _stream(seed, level, _NR), T, width, p_nr, batch))
    rh_masks = None
    if p_rh is not None:
        rh_masks = [_masks_for_stream(case, _stream(seed, level, _RH), T, H, p_rh, batch)
                    for level in range(L)]
    return MaskSchedule(case, L, T, nr_masks, rh_masks, seed, (p_nr, p_rh))
