"""Dense numerics shared by every model: stable reductions, CG, RNG, FD gradients.

All arrays are float64 numpy arrays in row-major order.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_CG_TOL = 1e-10


class CGDivergence(ArithmeticError):
    """Raised when conjugate gradient meets a non-finite or non-positive curvature."""


def make_rng(seed):
    """Seeded generator backed by PCG64 (bit-reproducible across platforms)."""
    return np.random.Generator(np.random.PCG64(seed))


def log_sum_exp(values, axis=None):
    """log(sum(exp(values))) via max-shift.

    With ``axis=None`` the whole array is reduced to a float.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty reduction")
    if axis is None:
        m = a.max()
        if not np.isfinite(m):
            return float(m)
        return float(m + np.log(np.exp(a - m).sum()))
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    return a - np.expand_dims(log_sum_exp(a, axis=axis), axis)


def mean_abs(t):
    """Average absolute value of the entries; the matrix norm used for scaling."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("mean_abs of empty tensor")
    return float(np.abs(t).mean())


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear map on vectors of length ``dim``.

    ``apply`` must accept arrays whose last axis has length ``dim``; leading
    axes are independent systems.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(a.shape[0], lambda v: v @ a.T)


def conjugate_gradient(op, b, tol=DEFAULT_CG_TOL, max_iter=None):
    """Solve ``op(x) = b`` for symmetric positive-definite ``op``.

    ``b`` may carry leading batch axes; every system is iterated until its
    relative residual ``||op(x) - b|| / max(||b||, 1e-30)`` falls below
    ``tol``.  Converged systems are frozen while the others continue.

    Returns ``(x, residual, iters)`` where ``residual`` is the largest true
    relative residual over the batch.  Hitting ``max_iter`` returns the last
    iterate rather than raising.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != op.dim:
        raise ValueError(f"rhs length {b.shape[-1]} != operator dim {op.dim}")
    if max_iter is None:
        max_iter = 10 * op.dim

    bnorm = np.maximum(np.linalg.norm(b, axis=-1), 1e-30)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.einsum("...i,...i->...", r, r)
    iters = 0
    while iters < max_iter:
        active = np.sqrt(rs) / bnorm > tol
        if not np.any(active):
            break
        ap = op.apply(p)
        pap = np.einsum("...i,...i->...", p, ap)
        if not np.all(np.isfinite(ap)) or np.any(pap[active] <= 0):
            raise CGDivergence("CG divergence: operator is not SPD or badly conditioned")
        step = np.where(active, rs / np.where(active, pap, 1.0), 0.0)
        x = x + step[..., None] * p
        r = r - step[..., None] * ap
        rs_new = np.einsum("...i,...i->...", r, r)
        beta = np.where(active, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = np.where(active[..., None], r + beta[..., None] * p, p)
        rs = np.where(active, rs_new, rs)
        iters += 1
        if not np.all(np.isfinite(x)):
            raise CGDivergence("CG divergence: non-finite iterate")

    true_res = np.linalg.norm(op.apply(x) - b, axis=-1) / bnorm
    return x, float(np.max(true_res)), iters


def finite_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(k) for k in np.unravel_index(i, x.shape))
            raise FloatingPointError(f"non-finite objective at coordinate {idx}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    """max |a - b| / max(max|b|, floor); the comparison used by gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))
