"""Randomised verification routines: kernel/oracle equivalence and gradient checks.

Both always run in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from structdrop.kernels import gemm_lhs_colsparse, gemm_lhs_rowsparse, gemm_output_colsparse
from structdrop.masks import apply_structured, sample_structured_mask
from structdrop.model import ModelConfig, forward_window, init_params, loss_and_grad, backward_window, zero_state

KERNEL_RATES = (0.25, 0.5, 0.65)
KERNEL_TOL = 1e-10
GRADCHECK_TOL = 1e-5
GRADCHECK_EPS = 1e-5


def rel_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Max abs difference relative to the largest reference magnitude."""
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    diff = float(np.max(np.abs(actual - expected))) if expected.size else 0.0
    if scale == 0.0:
        return diff
    return diff / scale


@dataclass
class KernelCheck:
    kernel: str
    shape: tuple
    rate: float
    error: float
    zeros_exact: bool

    @property
    def passed(self) -> bool:
        return self.error <= KERNEL_TOL and self.zeros_exact


def check_kernels_once(rng: np.random.Generator) -> list[KernelCheck]:
    """One random instance of each of the three kernels against its dense oracle."""
    H = int(rng.integers(8, 257))
    B = int(rng.integers(1, 65))
    M = int(rng.integers(1, 257))
    p = float(rng.choice(KERNEL_RATES))
    mask = sample_structured_mask(H, p, rng)
    drop = mask.dropped
    out = []

    X = rng.standard_normal((B, H))
    Xm = apply_structured(X, mask)
    W = rng.standard_normal((H, M))
    got = gemm_lhs_colsparse(Xm, mask, W)
    out.append(KernelCheck("lhs_colsparse", (B, H, M), p, rel_error(got, Xm @ W), True))

    G = rng.standard_normal((B, M))
    Wt = rng.standard_normal((M, H))
    got = gemm_output_colsparse(G, Wt, mask)
    oracle = apply_structured(G @ Wt, mask)
    out.append(KernelCheck("output_colsparse", (B, M, H), p, rel_error(got, oracle),
                           bool(np.all(got[:, drop] == 0.0))))

    XmT = Xm.T.copy()
    got = gemm_lhs_rowsparse(XmT, mask, G)
    out.append(KernelCheck("lhs_rowsparse", (H, B, M), p, rel_error(got, XmT @ G),
                           bool(np.all(got[drop] == 0.0))))
    return out


def verify_kernels(trials: int = 100, seed: int = 0) -> list[KernelCheck]:
    rng = np.random.default_rng(seed)
    checks = []
    for _ in range(trials):
        checks.extend(check_kernels_once(rng))
    return checks


@dataclass
class GradcheckResult:
    """``max_rel_error`` is the worst per-tensor :func:`rel_error`.

    ``worst`` names that tensor by its index in ``ModelParams.arrays()``.
    """

    max_rel_error: float
    n_params: int
    worst: int
    per_tensor: list

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRADCHECK_TOL


def gradcheck_config(hidden=8, layers=2, mode="nr-rh-st", vocab=12, embed_dim=8, dropout=0.5) -> ModelConfig:
    return ModelConfig(vocab=vocab, embed_dim=embed_dim, hidden=hidden, layers=layers,
                       dropout_nr=dropout, mode_label=mode)


def gradcheck(hidden=8, batch=4, steps=5, layers=2, mode="nr-rh-st", seed=0, vocab=12, embed_dim=8,
              kernel_mode="sparse", eps=GRADCHECK_EPS, init_range=0.5) -> GradcheckResult:
    """Central finite differences over every model parameter.

    Masks are sampled once from ``seed`` and held fixed, so the loss is a
    smooth function of the parameters.
    """
    config = gradcheck_config(hidden, layers, mode, vocab, embed_dim)
    rng = np.random.default_rng([seed, 7])
    params = init_params(config, init_range, seed=[seed, 0], dtype=np.float64)
    tokens = rng.integers(0, vocab, size=(batch, steps))
    targets = rng.integers(0, vocab, size=(batch, steps))
    carried = zero_state(config, batch, np.float64)
    for s in carried:
        s.h[:] = rng.uniform(-0.5, 0.5, s.h.shape)
        s.c[:] = rng.uniform(-0.5, 0.5, s.c.shape)
    schedule = config.schedule(batch, steps, [seed, 1])

    def loss_at():
        logits, _, _ = forward_window(params, config, tokens, carried, schedule, kernel_mode)
        return loss_and_grad(logits, targets)[0]

    logits, tape, _ = forward_window(params, config, tokens, carried, schedule, kernel_mode)
    _, d_logits = loss_and_grad(logits, targets)
    grads = backward_window(params, tape, d_logits, schedule, kernel_mode).arrays()

    errors = []
    n = 0
    for p, g in zip(params.arrays(), grads):
        flat_p = p.reshape(-1)
        numeric = np.empty(flat_p.size)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + eps
            up = loss_at()
            flat_p[j] = orig - eps
            down = loss_at()
            flat_p[j] = orig
            numeric[j] = (up - down) / (2 * eps)
        n += flat_p.size
        errors.append(rel_error(g.reshape(-1), numeric))
    worst = int(np.argmax(errors))
    return GradcheckResult(float(errors[worst]), n, worst, errors)
