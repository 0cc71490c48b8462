"""Binary Gaussian CRF with a class-agnostic Potts pairwise term.

Scores live in a length-2L vector ``s = [s_1 | s_2]`` (label 0 block first).
The pairwise matrix is ``W = [[0, A A^T], [A A^T, 0]]`` for per-pixel
embeddings ``A`` (L x d); it is only ever applied matrix-free.  Inference
solves ``(W + lam I) s = U`` by conjugate gradient.

``W`` has eigenvalues ``+-eig(A A^T)``, so ``W + lam I`` is positive
definite exactly when ``lam > ||A||_2^2``.  Callers keep embeddings inside
that ball; CG raises :class:`~scalecrf.numerics.CGDivergence` otherwise.

Batched kernels take ``A`` of shape (B, L, d) and vectors of shape (B, 2L).
"""

from dataclasses import dataclass

import numpy as np

from .numerics import DEFAULT_CG_TOL, LinearOperator, conjugate_gradient, log_softmax

DEFAULT_LAMBDA = 1.0


@dataclass(frozen=True)
class GcrfSystem:
    unary: np.ndarray  # (2L,)
    embeddings: np.ndarray  # (L, d)
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        u = np.array(self.unary, dtype=np.float64)
        a = np.array(self.embeddings, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("embeddings must be L x d")
        if u.shape != (2 * a.shape[0],):
            raise ValueError(f"unary length {u.shape} != 2L = {2 * a.shape[0]}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        u.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "unary", u)
        object.__setattr__(self, "embeddings", a)

    @property
    def n_pixels(self):
        return self.embeddings.shape[0]


def batch_apply_pairwise(A, v):
    """``W v`` for stacked systems without forming ``A A^T``."""
    L = A.shape[-2]
    v1, v2 = v[..., :L], v[..., L:]
    proj1 = np.einsum("...ld,...l->...d", A, v1)
    proj2 = np.einsum("...ld,...l->...d", A, v2)
    return np.concatenate(
        [np.einsum("...ld,...d->...l", A, proj2), np.einsum("...ld,...d->...l", A, proj1)],
        axis=-1,
    )


def system_operator(A, lam):
    """``W + lam I`` as a :class:`LinearOperator` over the last axis."""
    return LinearOperator(2 * A.shape[-2], lambda v: batch_apply_pairwise(A, v) + lam * v)


def batch_solve(A, U, lam, tol=DEFAULT_CG_TOL):
    """Return ``(s, residual, iters)`` for ``(W + lam I) s = U``."""
    return conjugate_gradient(system_operator(A, lam), U, tol=tol)


def batch_backward(A, s_star, g_s, lam, tol=DEFAULT_CG_TOL):
    """Gradients w.r.t. unaries and embeddings given ``dL/ds`` at ``s_star``.

    ``dL/dU = (W + lam I)^{-1} dL/ds`` and ``dL/dW = -dL/dU s*^T``; the
    latter is contracted through ``W(A)`` directly into an (L x d) gradient.
    """
    L = A.shape[-2]
    g_u, _, _ = conjugate_gradient(system_operator(A, lam), g_s, tol=tol)
    g1, g2 = g_u[..., :L], g_u[..., L:]
    s1, s2 = s_star[..., :L], s_star[..., L:]

    def outer(a, b):
        # a (b^T A): (.., L) x (.., d)
        return a[..., :, None] * np.einsum("...l,...ld->...d", b, A)[..., None, :]

    g_a = -(outer(g1, s2) + outer(g2, s1) + outer(s2, g1) + outer(s1, g2))
    return g_u, g_a


def batch_predict(s):
    L = s.shape[-1] // 2
    return (s[..., L:] > s[..., :L]).astype(np.int64)


def _pixel_logits(s):
    L = s.shape[-1] // 2
    return np.stack([s[..., :L], s[..., L:]], axis=-1)


def batch_ce(s, y):
    """Per-image CE of softmax marginals, plus its gradient w.r.t. ``s``."""
    logits = _pixel_logits(s)
    log_p = log_softmax(logits, axis=-1)
    L = logits.shape[-2]
    loss = -np.take_along_axis(log_p, y[..., None], axis=-1)[..., 0].mean(axis=-1)
    g = (np.exp(log_p) - np.eye(2)[y]) / L
    return loss, np.concatenate([g[..., 0], g[..., 1]], axis=-1)


# ---------------------------------------------------------------------------
# single-image API
# ---------------------------------------------------------------------------


def apply_pairwise(sys, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (2 * sys.n_pixels,):
        raise ValueError("vector length must be 2L")
    return batch_apply_pairwise(sys.embeddings, v)


def dense_pairwise(embeddings):
    """Materialized ``W``; for tests and small diagnostics only."""
    a = np.asarray(embeddings, dtype=np.float64)
    b = a @ a.T
    z = np.zeros_like(b)
    return np.block([[z, b], [b, z]])


def solve_scores(sys, tol=DEFAULT_CG_TOL):
    s, _, _ = batch_solve(sys.embeddings, sys.unary, sys.lam, tol)
    return s


def predict(s):
    """Per-pixel argmax over the two label blocks; ties go to label 0."""
    return batch_predict(np.asarray(s, dtype=np.float64))


def marginals_and_ce(sys, s, y):
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if s.shape != (2 * sys.n_pixels,) or y.shape != (sys.n_pixels,):
        raise ValueError("score/label shapes do not match the system")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be binary")
    loss, _ = batch_ce(s, y)
    return np.exp(log_softmax(_pixel_logits(s), axis=-1)), float(loss)


def backward(sys, s_star, dl_ds, tol=DEFAULT_CG_TOL):
    """Returns ``(dL/dU, dL/dA)`` for one image."""
    return batch_backward(sys.embeddings, np.asarray(s_star, dtype=np.float64),
                          np.asarray(dl_ds, dtype=np.float64), sys.lam, tol)


def loss_and_grads(sys, y, tol=DEFAULT_CG_TOL):
    """End-to-end CE through the solve: ``(loss, dL/dU, dL/dA)``."""
    y = np.asarray(y, dtype=np.int64)
    s = solve_scores(sys, tol)
    loss, g_s = batch_ce(s, y)
    g_u, g_a = backward(sys, s, g_s, tol)
    return float(loss), g_u, g_a
