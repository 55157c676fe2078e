"""Phase-wise dense vs compacted-sparse GEMM timing.

Each phase replays the GEMM workload of a ``T``-step window for one LSTM
layer plus (when ``V > 0``) the output projection:

* ``FP``: input and recurrent projections, head projection
* ``BP``: gradients w.r.t. the layer input and previous hidden state, and
  w.r.t. the head input
* ``WG``: weight gradients of ``W``, ``U`` and the head

The dense side times plain GEMMs on mask-applied operands; the sparse side
times the compacted kernels including their gather/scatter work.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from structdrop.kernels import (
    Scratch,
    SparsityKind,
    flops,
    gemm_lhs_colsparse,
    gemm_lhs_rowsparse,
    gemm_output_colsparse,
)
from structdrop.masks import StructuredMask, apply_mask, sample_element_mask, sample_structured_mask
from structdrop.tensor_core import resolve_dtype

PHASES = ("FP", "BP", "WG")
BENCH_MODES = ("baseline-nr-random", "nr-st", "nr-rh-st")
CSV_COLUMNS = ("phase", "mode", "H", "B", "T", "p", "wall_ns_dense", "wall_ns_sparse", "speedup",
               "flops_dense", "flops_sparse", "threads")

# published GPU speedups for the 650-unit two-layer config, printed next to local numbers
REFERENCE_SPEEDUPS = {
    "nr-st": {"FP": 1.29, "BP": 1.01, "WG": 1.42, "overall": 1.17},
    "nr-rh-st": {"FP": 1.66, "BP": 1.10, "WG": 1.57, "overall": 1.45},
}


class CorrectnessError(AssertionError):
    pass


@dataclass
class BenchConfig:
    H: list = field(default_factory=lambda: [256])
    B: list = field(default_factory=lambda: [20])
    T: list = field(default_factory=lambda: [35])
    V: list = field(default_factory=lambda: [0])
    p: list = field(default_factory=lambda: [0.5])
    modes: list = field(default_factory=lambda: ["nr-st", "nr-rh-st"])
    repetitions: int = 5
    warmup: int = 1
    threads: int = 1
    precision: str = "single"
    seed: int = 0
    include_elementwise: bool = False
    out: str = "bench.csv"

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        for m in self.modes:
            if m not in BENCH_MODES:
                raise ValueError(f"unknown bench mode {m!r}")
        resolve_dtype(self.precision)

    @classmethod
    def from_json(cls, path) -> "BenchConfig":
        raw = json.loads(Path(path).read_text())
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class BenchRecord:
    phase: str
    mode: str
    H: int
    B: int
    T: int
    p: float
    wall_ns_dense: int
    wall_ns_sparse: int
    speedup: float
    flops_dense: int
    flops_sparse: int
    threads: int

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


class _Workload:
    """Seeded operands and per-step masks for one (H, B, T, V, p, mode) point."""

    def __init__(self, H, B, T, V, p, mode, seed, dtype):
        rng = np.random.default_rng(seed)
        self.H, self.B, self.T, self.V = H, B, T, V
        self.mode = mode

        def rand(*shape):
            return rng.standard_normal(shape).astype(dtype)

        def mask():
            if mode == "baseline-nr-random":
                return sample_element_mask((B, H), p, rng)
            return sample_structured_mask(H, p, rng)

        self.W, self.U = rand(H, 4 * H), rand(H, 4 * H)
        self.head = rand(H, V) if V else None
        self.nr = [mask() for _ in range(T)]
        self.rh = [mask() for _ in range(T)] if mode == "nr-rh-st" else [None] * T
        self.out = [mask() for _ in range(T)] if V else [None] * T
        self.X = [apply_mask(rand(B, H), m) for m in self.nr]
        self.Hp = [apply_mask(rand(B, H), m) for m in self.rh]
        self.Ho = [apply_mask(rand(B, H), m) for m in self.out]
        self.G = [rand(B, 4 * H) for _ in range(T)]
        self.Gv = [rand(B, V) for _ in range(T)] if V else [None] * T

    def gemms(self, t: int):
        """(activation, weight, mask, gradient) for each projection at step ``t``."""
        out = [(self.X[t], self.W, self.nr[t], self.G[t]), (self.Hp[t], self.U, self.rh[t], self.G[t])]
        if self.V:
            out.append((self.Ho[t], self.head, self.out[t], self.Gv[t]))
        return out


def _sparse(mask) -> bool:
    return isinstance(mask, StructuredMask)


def _run_dense(wl: _Workload, phase: str, elementwise: bool) -> list:
    res = []
    for t in range(wl.T):
        for X, W, m, G in wl.gemms(t):
            if phase == "FP":
                res.append(X @ W)
            elif phase == "BP":
                r = G @ W.T
                res.append(apply_mask(r, m) if elementwise else r)
            else:
                res.append(X.T @ G)
    return res


def _run_sparse(wl: _Workload, phase: str, scratch: Scratch) -> list:
    res = []
    for t in range(wl.T):
        for X, W, m, G in wl.gemms(t):
            if phase == "FP":
                res.append(gemm_lhs_colsparse(X, m, W, scratch) if _sparse(m) else X @ W)
            elif phase == "BP":
                res.append(gemm_output_colsparse(G, W.T, m, scratch) if _sparse(m) else apply_mask(G @ W.T, m))
            else:
                res.append(gemm_lhs_rowsparse(X.T, m, G, scratch) if _sparse(m) else X.T @ G)
    return res


def _flops(wl: _Workload, phase: str) -> tuple[int, int]:
    kind = {"FP": SparsityKind.LhsColumnSparse, "BP": SparsityKind.OutputColumnSparse,
            "WG": SparsityKind.LhsRowSparse}[phase]
    dense = sparse = 0
    for t in range(wl.T):
        for X, W, m, G in wl.gemms(t):
            M = W.shape[1]
            B = wl.B
            d = flops(kind, B, wl.H, M)
            dense += d
            sparse += flops(kind, B, wl.H, M, m) if _sparse(m) else d
    return dense, sparse


def _check(wl: _Workload, phase: str, dense: list, sparse: list, tol: float) -> None:
    i = 0
    for t in range(wl.T):
        for X, W, m, G in wl.gemms(t):
            ref = apply_mask(dense[i], m) if phase == "BP" else dense[i]
            got = sparse[i]
            scale = float(np.max(np.abs(ref))) or 1.0
            err = float(np.max(np.abs(got - ref))) / scale
            if err > tol:
                raise CorrectnessError(f"{phase} step {t}: sparse result differs from dense by {err:.3g}")
            i += 1


def bench_phase(phase: str, H: int, B: int, T: int, p: float, mode: str, reps: int = 5, warmup: int = 1,
                seed: int = 0, V: int = 0, threads: int = 1, precision="single",
                include_elementwise: bool = False, workload: Optional[_Workload] = None) -> BenchRecord:
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    if mode not in BENCH_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    dtype = resolve_dtype(precision)
    wl = workload or _Workload(H, B, T, V, p, mode, seed, dtype)
    scratch = Scratch()
    tol = 1e-10 if dtype == np.float64 else 1e-4
    with threadpool_limits(threads):
        _check(wl, phase, _run_dense(wl, phase, False), _run_sparse(wl, phase, scratch), tol)
        dense_ns, sparse_ns = [], []
        for r in range(warmup + reps):
            t0 = time.perf_counter_ns()
            _run_dense(wl, phase, include_elementwise)
            t1 = time.perf_counter_ns()
            _run_sparse(wl, phase, scratch)
            t2 = time.perf_counter_ns()
            if r >= warmup:
                dense_ns.append(t1 - t0)
                sparse_ns.append(t2 - t1)
    wd, ws = int(np.median(dense_ns)), int(np.median(sparse_ns))
    fd, fs = _flops(wl, phase)
    return BenchRecord(phase, mode, H, B, T, p, wd, ws, wd / max(ws, 1), fd, fs, threads)


def overall_record(records: Sequence[BenchRecord]) -> BenchRecord:
    r0 = records[0]
    wd = sum(r.wall_ns_dense for r in records)
    ws = sum(r.wall_ns_sparse for r in records)
    return BenchRecord("overall", r0.mode, r0.H, r0.B, r0.T, r0.p, wd, ws, wd / max(ws, 1),
                       sum(r.flops_dense for r in records), sum(r.flops_sparse for r in records), r0.threads)


def bench_suite(config: BenchConfig, csv_path=None) -> list[BenchRecord]:
    dtype = resolve_dtype(config.precision)
    records = []
    grid = itertools.product(config.H, config.B, config.T, config.V, config.p, config.modes)
    for H, B, T, V, p, mode in grid:
        wl = _Workload(H, B, T, V, p, mode, config.seed, dtype)
        phase_recs = [bench_phase(ph, H, B, T, p, mode, config.repetitions, config.warmup, config.seed, V,
                                  config.threads, config.precision, config.include_elementwise, wl)
                      for ph in PHASES]
        records += phase_recs + [overall_record(phase_recs)]
    path = config.out if csv_path is None else csv_path
    if path:
        write_csv(path, records)
    return records


def write_csv(path, records: Sequence[BenchRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row())
