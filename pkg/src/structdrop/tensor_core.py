"""Dense matrix primitives used as the reference path.

Matrices are 2-D, C-contiguous numpy arrays of float32 or float64. Every
function here validates shapes and returns a fresh array, so the sparse
kernels can be checked against these results directly.
"""

from __future__ import annotations

from typing import Literal, Sequence

import numpy as np

DTYPES = {"single": np.float32, "double": np.float64, "f32": np.float32, "f64": np.float64}

GATE_ORDER = ("i", "f", "o", "g")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class IndexListError(ValueError):
    """A gather/scatter index list is out of range or not strictly increasing."""


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def as_matrix(a, dtype=None) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_2d(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a.ndim != 2:
            raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    _check_2d(A, B)
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"inner dimensions differ: {A.shape} @ {B.shape}")
    if A.dtype != B.dtype:
        raise ShapeError(f"precision mismatch: {A.dtype} vs {B.dtype}")
    return A @ B


def transpose(A: np.ndarray) -> np.ndarray:
    _check_2d(A)
    return np.ascontiguousarray(A.T)


def ew(op: Literal["add", "sub", "hadamard"], A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape != B.shape:
        raise ShapeError(f"elementwise {op} on {A.shape} and {B.shape}")
    if op == "add":
        return A + B
    if op == "sub":
        return A - B
    if op == "hadamard":
        return A * B
    raise ValueError(f"unknown elementwise op {op!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and is exact at 0
    out = np.tanh(x * x.dtype.type(0.5))
    out += 1
    out *= x.dtype.type(0.5)
    return out


def activation(kind: Literal["sigmoid", "tanh"], A: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(A)
    if kind == "tanh":
        return np.tanh(A)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: Literal["sigmoid", "tanh"], activated: np.ndarray,
                    upstream: np.ndarray) -> np.ndarray:
    """Gradient through an activation, given its forward *output*."""
    if activated.shape != upstream.shape:
        raise ShapeError(f"activation_grad on {activated.shape} and {upstream.shape}")
    if kind == "sigmoid":
        return upstream * activated * (1.0 - activated)
    if kind == "tanh":
        return upstream * (1.0 - activated * activated)
    raise ValueError(f"unknown activation {kind!r}")


def check_index_list(keep: Sequence[int], n: int) -> np.ndarray:
    idx = np.asarray(keep, dtype=np.intp)
    if idx.ndim != 1:
        raise IndexListError("index list must be one-dimensional")
    if idx.size:
        if idx[0] < 0 or idx[-1] >= n:
            raise IndexListError(f"indices out of range [0, {n})")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise IndexListError("indices must be strictly increasing")
    return idx


def gather_columns(A: np.ndarray, keep, out: np.ndarray | None = None) -> np.ndarray:
    _check_2d(A)
    idx = check_index_list(keep, A.shape[1])
    return np.take(A, idx, axis=1, out=out)


def scatter_columns(Acomp: np.ndarray, keep, n: int) -> np.ndarray:
    _check_2d(Acomp)
    idx = check_index_list(keep, n)
    if Acomp.shape[1] != idx.size:
        raise ShapeError(f"{Acomp.shape[1]} compacted columns for {idx.size} indices")
    out = np.zeros((Acomp.shape[0], n), dtype=Acomp.dtype)
    out[:, idx] = Acomp
    return out


def gather_rows(A: np.ndarray, keep, out: np.ndarray | None = None) -> np.ndarray:
    _check_2d(A)
    idx = check_index_list(keep, A.shape[0])
    return np.take(A, idx, axis=0, out=out)


def scatter_rows(Acomp: np.ndarray, keep, n: int) -> np.ndarray:
    _check_2d(Acomp)
    idx = check_index_list(keep, n)
    if Acomp.shape[0] != idx.size:
        raise ShapeError(f"{Acomp.shape[0]} compacted rows for {idx.size} indices")
    out = np.zeros((n, Acomp.shape[1]), dtype=Acomp.dtype)
    out[idx] = Acomp
    return out

