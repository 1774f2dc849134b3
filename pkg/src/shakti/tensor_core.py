"""Dense tensor math for the forward pass.

Tensors are plain numpy arrays: row-major, contiguous, rank 1-4, dtype
float32 or float16. float16 is a storage dtype only; every op widens to
float32 before doing arithmetic.

Reductions have a fixed order per output element. ``matmul`` computes each
output row with one vector kernel call whose reduction order depends only on
the inner dimension, so row ``i`` of a batched product is bit-identical to
the product of row ``i`` alone. That property is what makes batched prefill
reproduce token-by-token decode exactly.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

F32 = np.dtype(np.float32)
F16 = np.dtype(np.float16)

# Most negative finite float32; used in place of -inf for masked logits.
NEG_INF = np.float32(np.finfo(np.float32).min)


def check_tensor(x: np.ndarray) -> np.ndarray:
    if not isinstance(x, np.ndarray):
        raise TypeError(f"expected ndarray, got {type(x).__name__}")
    if x.dtype not in (F32, F16):
        raise TypeError(f"unsupported dtype {x.dtype}; tensors are float32 or float16")
    if not 1 <= x.ndim <= 4 or 0 in x.shape:
        raise ShapeError(f"bad tensor shape {x.shape}: rank must be 1-4 with sizes >= 1")
    return x


def widen(x: np.ndarray) -> np.ndarray:
    return x if x.dtype == F32 else np.asarray(x, dtype=F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a[M,K] @ b[K,N]`` accumulated in float32, one row at a time."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    a, b = widen(a), widen(b)
    out = np.empty((a.shape[0], b.shape[1]), dtype=F32)
    for i in range(a.shape[0]):
        out[i] = np.dot(a[i], b)
    return out


def matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``w[N,K] @ x[K]``: the weight-times-activation product used by linear layers."""
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec dimension mismatch: {w.shape} x {x.shape}")
    return np.dot(widen(w), widen(x))


def softmax_row(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``scale * x``, max-subtracted.

    NaN anywhere in a row yields NaN for that row.
    """
    z = widen(x) * np.float32(scale)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    x = widen(x)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(F32)
    return x * sig


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if gamma.ndim != 1 or x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"rmsnorm: gain {gamma.shape} does not match last dim of {x.shape}")
    x = widen(x)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(eps)) * widen(gamma)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return widen(a) + widen(b)
