"""Linear-chain CRF with a shared transition matrix.

Score of a labeling ``y`` for unaries ``U`` (L x M) and transitions ``W``
(M x M)::

    F(y) = sum_j U[j, y_j] + sum_j W[y_j, y_{j+1}]

The public single-sequence functions wrap ``batch_*`` kernels that work on
stacks of equal-length sequences, ``U`` of shape (B, L, M) with one ``W``.
All recursions run in log space.  Labels are 0-based.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax, log_sum_exp, softmax

DEFAULT_MF_SWEEPS = 10


@dataclass(frozen=True)
class ChainPotentials:
    unary: np.ndarray
    pairwise: np.ndarray

    def __post_init__(self):
        u = np.array(self.unary, dtype=np.float64)
        w = np.array(self.pairwise, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] < 1 or u.shape[1] < 2:
            raise ValueError(f"unary must be L x M with L >= 1, M >= 2, got {u.shape}")
        if w.shape != (u.shape[1], u.shape[1]):
            raise ValueError(f"pairwise shape {w.shape} does not match M={u.shape[1]}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(w))):
            raise ValueError("potentials must be finite")
        u.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "unary", u)
        object.__setattr__(self, "pairwise", w)

    @property
    def length(self):
        return self.unary.shape[0]

    @property
    def n_labels(self):
        return self.unary.shape[1]


@dataclass(frozen=True)
class InferenceResult:
    log_partition: float
    unary_marginals: np.ndarray  # (L, M)
    pairwise_marginals: np.ndarray  # (L-1, M, M)


def check_labels(y, length, n_labels):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != length:
        raise ValueError(f"label sequence length {y.shape} != {length}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_labels):
        raise ValueError(f"label out of range [0, {n_labels})")
    return y


def _one_hot(Y, n_labels):
    return np.eye(n_labels)[Y]


def transition_counts(Y, n_labels):
    """Number of (a, b) transitions summed over a batch of labelings."""
    Y = np.asarray(Y)
    counts = np.zeros((n_labels, n_labels))
    if Y.shape[-1] > 1:
        np.add.at(counts, (Y[..., :-1].ravel(), Y[..., 1:].ravel()), 1.0)
    return counts


# ---------------------------------------------------------------------------
# batched kernels: U (B, L, M), W (M, M), Y (B, L)
# ---------------------------------------------------------------------------


def batch_score(U, W, Y):
    B, L, _ = U.shape
    unary = np.take_along_axis(U, Y[:, :, None], axis=2)[:, :, 0].sum(axis=1)
    pair = W[Y[:, :-1], Y[:, 1:]].sum(axis=1) if L > 1 else np.zeros(B)
    return unary + pair


def _forward(U, W):
    alpha = np.empty_like(U)
    alpha[:, 0] = U[:, 0]
    for j in range(1, U.shape[1]):
        alpha[:, j] = U[:, j] + log_sum_exp(alpha[:, j - 1, :, None] + W, axis=1)
    return alpha


def _backward(U, W):
    beta = np.zeros_like(U)
    for j in range(U.shape[1] - 2, -1, -1):
        beta[:, j] = log_sum_exp(W + (U[:, j + 1] + beta[:, j + 1])[:, None, :], axis=2)
    return beta


def batch_forward_backward(U, W):
    """Return ``(alpha, beta, log_z)`` log-space messages."""
    alpha = _forward(U, W)
    beta = _backward(U, W)
    log_z = log_sum_exp(alpha[:, -1], axis=1)
    return alpha, beta, log_z


def batch_marginals(U, W):
    """Exact ``(log_z, unary_marginals, pairwise_marginals)`` for a batch."""
    alpha, beta, log_z = batch_forward_backward(U, W)
    unary = np.exp(alpha + beta - log_z[:, None, None])
    log_pair = (alpha[:, :-1, :, None] + W
                + (U[:, 1:] + beta[:, 1:])[:, :, None, :]
                - log_z[:, None, None, None])
    return log_z, unary, np.exp(log_pair)


def _forward_backward_vjp(U, W, alpha, beta, log_z, g_logp, g_logz):
    """Pull cotangents on log-marginals and log Z back to (U, W).

    Walks the two message recursions in reverse.  ``gW`` is summed over the
    batch; ``gU`` stays per instance.
    """
    L = U.shape[1]
    g_alpha = g_logp.copy()
    g_beta = g_logp.copy()
    g_logz = g_logz - g_logp.sum(axis=(1, 2))
    g_alpha[:, -1] += g_logz[:, None] * softmax(alpha[:, -1], axis=1)
    gU = np.zeros_like(U)
    gW = np.zeros_like(W)

    # beta_j[a] = lse_b(W[a, b] + U_{j+1}[b] + beta_{j+1}[b]), built right to left
    for j in range(L - 1):
        t = W + (U[:, j + 1] + beta[:, j + 1])[:, None, :]
        gt = g_beta[:, j, :, None] * np.exp(t - beta[:, j, :, None])
        gW += gt.sum(axis=0)
        col = gt.sum(axis=1)
        gU[:, j + 1] += col
        g_beta[:, j + 1] += col

    # alpha_j[b] = U_j[b] + lse_a(alpha_{j-1}[a] + W[a, b]), built left to right
    for j in range(L - 1, 0, -1):
        gU[:, j] += g_alpha[:, j]
        s = alpha[:, j - 1, :, None] + W
        gs = g_alpha[:, j, None, :] * np.exp(s - (alpha[:, j] - U[:, j])[:, None, :])
        gW += gs.sum(axis=0)
        g_alpha[:, j - 1] += gs.sum(axis=2)
    gU[:, 0] += g_alpha[:, 0]
    return gU, gW


def batch_viterbi(U, W):
    """MAP labelings; ties go to the smallest label index at every step."""
    B, L, M = U.shape
    delta = U[:, 0].copy()
    back = np.zeros((B, L, M), dtype=np.int64)
    for j in range(1, L):
        cand = delta[:, :, None] + W
        back[:, j] = cand.argmax(axis=1)
        delta = U[:, j] + cand.max(axis=1)
    Y = np.empty((B, L), dtype=np.int64)
    Y[:, -1] = delta.argmax(axis=1)
    rows = np.arange(B)
    for j in range(L - 1, 0, -1):
        Y[:, j - 1] = back[rows, j, Y[:, j]]
    return Y


def _mean_field_sweeps(U, W, sweeps):
    """Gauss-Seidel mean field; returns (q, log_q, history of q per sweep)."""
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    L = U.shape[1]
    q = softmax(U, axis=2)
    log_q = np.empty_like(U)
    hist = [q.copy()]
    for _ in range(sweeps):
        for j in range(L):
            z = U[:, j].copy()
            if j + 1 < L:
                z += q[:, j + 1] @ W.T
            if j > 0:
                z += q[:, j - 1] @ W
            log_q[:, j] = log_softmax(z, axis=1)
            q[:, j] = np.exp(log_q[:, j])
        hist.append(q.copy())
    return q, log_q, hist


def _mean_field_vjp(U, W, hist, g_logq):
    """Reverse-mode through the unrolled sweeps; ``g_logq`` hits the final q."""
    sweeps = len(hist) - 1
    L = U.shape[1]
    gq = np.zeros_like(U)
    gU = np.zeros_like(U)
    gW = np.zeros_like(W)
    for s in range(sweeps - 1, -1, -1):
        new, old = hist[s + 1], hist[s]
        for j in range(L - 1, -1, -1):
            qj = new[:, j]
            g = gq[:, j]
            gz = qj * (g - (g * qj).sum(axis=1, keepdims=True))
            if s == sweeps - 1:
                gl = g_logq[:, j]
                gz += gl - qj * gl.sum(axis=1, keepdims=True)
            gq[:, j] = 0.0
            gU[:, j] += gz
            if j + 1 < L:
                gW += gz.T @ old[:, j + 1]
                gq[:, j + 1] += gz @ W
            if j > 0:
                gW += new[:, j - 1].T @ gz
                gq[:, j - 1] += gz @ W.T
    q0 = hist[0]
    gU += q0 * (gq - (gq * q0).sum(axis=2, keepdims=True))
    return gU, gW


def batch_mean_field(U, W, sweeps=DEFAULT_MF_SWEEPS):
    return _mean_field_sweeps(U, W, sweeps)[0]


def batch_loss_nll(U, W, Y):
    """Negative log-likelihood per instance with gradients (gW summed)."""
    M = U.shape[2]
    log_z, marg, pair = batch_marginals(U, W)
    loss = log_z - batch_score(U, W, Y)
    gU = marg - _one_hot(Y, M)
    gW = pair.sum(axis=(0, 1)) - transition_counts(Y, M)
    return loss, gU, gW


def batch_loss_ce(U, W, Y, mean_field_sweeps=None):
    """Cross-entropy on unary marginals, exact or mean-field."""
    B, L, M = U.shape
    g_logp = -_one_hot(Y, M) / L
    if mean_field_sweeps is None:
        alpha, beta, log_z = batch_forward_backward(U, W)
        log_p = alpha + beta - log_z[:, None, None]
        loss = -np.take_along_axis(log_p, Y[:, :, None], axis=2)[:, :, 0].mean(axis=1)
        gU, gW = _forward_backward_vjp(U, W, alpha, beta, log_z, g_logp, np.zeros(B))
    else:
        _, log_q, hist = _mean_field_sweeps(U, W, mean_field_sweeps)
        loss = -np.take_along_axis(log_q, Y[:, :, None], axis=2)[:, :, 0].mean(axis=1)
        gU, gW = _mean_field_vjp(U, W, hist, g_logp)
    return loss, gU, gW


def batch_loss_augmented_decode(U, W, Y):
    L, M = U.shape[1], U.shape[2]
    augmented = U + (1.0 - _one_hot(Y, M)) / L
    return batch_viterbi(augmented, W)


def batch_loss_ssvm(U, W, Y):
    """Margin-rescaled structured hinge with normalized Hamming margin."""
    M = U.shape[2]
    Y_star = batch_loss_augmented_decode(U, W, Y)
    margin = (Y_star != Y).mean(axis=1)
    loss = batch_score(U, W, Y_star) + margin - batch_score(U, W, Y)
    gU = _one_hot(Y_star, M) - _one_hot(Y, M)
    gW = transition_counts(Y_star, M) - transition_counts(Y, M)
    return loss, gU, gW, Y_star


def batch_marginal_argmax(U, W, mean_field_sweeps=None):
    if mean_field_sweeps is None:
        _, marg, _ = batch_marginals(U, W)
    else:
        marg = batch_mean_field(U, W, mean_field_sweeps)
    return marg.argmax(axis=2)


# ---------------------------------------------------------------------------
# single-sequence API
# ---------------------------------------------------------------------------


def _stack(p):
    return p.unary[None], p.pairwise


def score(p, y):
    y = check_labels(y, p.length, p.n_labels)
    U, W = _stack(p)
    return float(batch_score(U, W, y[None])[0])


def forward_backward(p):
    U, W = _stack(p)
    log_z, unary, pair = batch_marginals(U, W)
    return InferenceResult(float(log_z[0]), unary[0], pair[0])


def map_decode(p):
    """Viterbi labeling and its score."""
    U, W = _stack(p)
    y = batch_viterbi(U, W)[0]
    return y, score(p, y)


def mean_field(p, sweeps=DEFAULT_MF_SWEEPS):
    U, W = _stack(p)
    return batch_mean_field(U, W, sweeps)[0]


def loss_nll(p, y):
    y = check_labels(y, p.length, p.n_labels)
    U, W = _stack(p)
    loss, gU, gW = batch_loss_nll(U, W, y[None])
    return float(loss[0]), gU[0], gW


def loss_ce(p, y, mean_field_sweeps=None):
    """CE loss; ``mean_field_sweeps=None`` uses exact marginals."""
    y = check_labels(y, p.length, p.n_labels)
    U, W = _stack(p)
    loss, gU, gW = batch_loss_ce(U, W, y[None], mean_field_sweeps)
    return float(loss[0]), gU[0], gW


def hamming_margin(y, y2):
    y = np.asarray(y)
    y2 = np.asarray(y2)
    if y.shape != y2.shape or y.ndim != 1:
        raise ValueError(f"length mismatch: {y.shape} vs {y2.shape}")
    if y.size == 0:
        raise ValueError("empty label sequence")
    return float(np.mean(y != y2))


def loss_augmented_decode(p, y):
    y = check_labels(y, p.length, p.n_labels)
    U, W = _stack(p)
    return batch_loss_augmented_decode(U, W, y[None])[0]


def loss_ssvm(p, y):
    """Returns ``(loss, grad_u, grad_w, y_star)``."""
    y = check_labels(y, p.length, p.n_labels)
    U, W = _stack(p)
    loss, gU, gW, y_star = batch_loss_ssvm(U, W, y[None])
    return float(loss[0]), gU[0], gW, y_star[0]
