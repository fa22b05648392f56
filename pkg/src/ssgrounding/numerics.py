"""Numerically stable primitives shared by the losses, and a finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an input has no direction (zero norm)."""


class NumericError(FloatingPointError):
    """Raised when an evaluation produced NaN or Inf."""


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    per_coordinate_errors: np.ndarray
    step_size: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm


def normalize_rows(M):
    """Row-wise L2 normalization. Returns (normalized, norms)."""
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=-1, keepdims=True)
    if np.any(~(norms > 0.0)):
        raise DegenerateInputError("cannot normalize a zero row")
    return M / norms, norms


def normalize_rows_backward(grad_out, normalized, norms):
    """Gradient of row normalization: (g - u (u.g)) / |h| per row."""
    dot = np.sum(grad_out * normalized, axis=-1, keepdims=True)
    return (grad_out - normalized * dot) / norms


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (na > 0.0 and nb > 0.0):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def stable_softmax(logits, tau: float = 1.0, axis: int = -1):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_sum_exp(logits, axis=None):
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("log_sum_exp of an empty input")
    m = np.max(x, axis=axis, keepdims=True)
    # all -inf slice (masked-out set): keep -inf rather than NaN
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5, indices=None):
    """Central-difference gradient of a scalar function, one coordinate at a time.

    With ``indices`` (flat positions) only those coordinates are differenced and
    a 1-D array of matching length is returned.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    coords = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=int)
    grad = np.zeros(coords.size)
    for j, k in enumerate(coords):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {k}")
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape) if indices is None else grad


def relative_errors(analytic, numeric, floor: float = 1e-5):
    """Per-coordinate |a - n| / max(|a|, |n|, floor).

    The floor keeps coordinates whose true gradient is ~0 from dividing
    round-off noise by round-off noise; central differences at h=1e-5 carry
    absolute noise around 1e-10 for losses of order 10.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def check_gradient(f, x, analytic, h: float = 1e-5, floor: float = 1e-5,
                   indices=None) -> GradCheckReport:
    """Compare ``analytic`` with central differences, optionally on a coordinate subset."""
    numeric = finite_diff_gradient(f, x, h, indices)
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if indices is not None:
        a = a[np.asarray(indices, dtype=int)]
    errs = relative_errors(a, numeric, floor)
    return GradCheckReport(
        max_rel_error=float(errs.max()) if errs.size else 0.0,
        per_coordinate_errors=errs,
        step_size=h,
    )
