"""Central finite-difference gradient oracle.

The oracle never touches the tape: it re-runs the forward function with
perturbed inputs, so it stays independent of the reverse-mode path it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference estimate of d f / d x, elementwise.

    `f` must be deterministic and return a python float (or 0-d array).
    When `indices` is given, only those flat coordinates are probed and the
    remaining entries of the returned array are NaN-free zeros.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(x))
        flat[i] = keep - h
        fm = float(f(x))
        flat[i] = keep
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: non-finite f at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.data.shape)


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|,|b|,floor); floor keeps near-zero entries honest."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def pick_indices(rng, size: int, k: int) -> np.ndarray:
    """Deterministic coordinate subsample for finite-difference probing."""
    if size <= k:
        return np.arange(size)
    return np.sort(rng.permutation(size)[:k])
