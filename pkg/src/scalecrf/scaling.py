"""Relative scaling of unary and pairwise potentials.

Pure transforms on potentials (chain or Gaussian), the unary/pairwise ratio
statistic, the per-epoch alpha grid search, and the batched training-time
transforms with their backward passes.

Norms here are always :func:`~scalecrf.numerics.mean_abs`.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .chain_crf import ChainPotentials
from .gcrf import GcrfSystem
from .numerics import mean_abs

MODES = ("none", "online", "offline", "offline_reg", "temperature")
NORM_GUARD = 1e-8


def default_grid():
    return [2.0 ** t for t in range(-8, 9)]


@dataclass
class ScalingState:
    mode: str = "none"
    alpha: float = 1.0
    grid: list = field(default_factory=default_grid)
    reg_lambda: float = 0.0
    reg_alpha: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.reg_lambda < 0 or not self.reg_alpha > 0:
            raise ValueError("reg_lambda must be >= 0 and reg_alpha > 0")
        self.grid = [float(g) for g in self.grid]
        if self.mode == "online":
            if not self.grid or any(g <= 0 for g in self.grid):
                raise ValueError("online scaling needs a nonempty positive grid")
            if self.grid != sorted(self.grid):
                raise ValueError("alpha grid must be sorted")


def _check_alpha(alpha):
    if not alpha > 0:
        raise ValueError("alpha must be positive")


def pairwise_mean_abs(p):
    """mean_abs of the pairwise matrix; for a GCRF this is the dense (2L)^2 W."""
    if isinstance(p, GcrfSystem):
        a = p.embeddings
        # W has two copies of A A^T among (2L)^2 entries
        return float(np.abs(a @ a.T).mean() / 2.0)
    return mean_abs(p.pairwise)


def apply_unary_scale(p, alpha):
    _check_alpha(alpha)
    if isinstance(p, GcrfSystem):
        return GcrfSystem(alpha * p.unary, p.embeddings, p.lam)
    return ChainPotentials(alpha * p.unary, p.pairwise)


def temperature_scale(p, alpha):
    _check_alpha(alpha)
    if isinstance(p, GcrfSystem):
        return GcrfSystem(alpha * p.unary, math.sqrt(alpha) * p.embeddings, p.lam)
    return ChainPotentials(alpha * p.unary, alpha * p.pairwise)


def offline_normalize(p, alpha):
    """``U -> alpha U / ||U||``, ``W -> W / ||W||`` for a single instance."""
    _check_alpha(alpha)
    nu = mean_abs(p.unary)
    nw = pairwise_mean_abs(p)
    if nu == 0 or nw == 0:
        raise ValueError("degenerate potential norm")
    if isinstance(p, GcrfSystem):
        return GcrfSystem(alpha * p.unary / nu, p.embeddings / math.sqrt(nw), p.lam)
    return ChainPotentials(alpha * p.unary / nu, p.pairwise / nw)


def potential_ratio(p):
    """||U|| / ||W||, or ``inf`` when the pairwise part is identically zero."""
    nw = pairwise_mean_abs(p)
    if nw == 0:
        return math.inf
    return mean_abs(p.unary) / nw


def ratio_regularizer(p, reg_lambda, reg_alpha):
    """``lam (||U||/||W|| - alpha)^2`` and its gradients w.r.t. the potentials.

    For a chain the gradients are w.r.t. ``(unary, pairwise)``; for a GCRF
    w.r.t. ``(unary, embeddings)``.  ``sign(0) = 0``.
    """
    nu = mean_abs(p.unary)
    nw = pairwise_mean_abs(p)
    if nw == 0:
        raise ValueError("degenerate potential norm")
    r = nu / nw
    penalty = reg_lambda * (r - reg_alpha) ** 2
    coef = 2.0 * reg_lambda * (r - reg_alpha)
    g_u = coef / nw * np.sign(p.unary) / p.unary.size
    g_nw = -coef * nu / nw ** 2
    if isinstance(p, GcrfSystem):
        a = p.embeddings
        L = a.shape[0]
        # d mean|B|/2 / dA with B = A A^T, mean over the (2L)^2 entries of W
        g_pair = g_nw * 2.0 * (np.sign(a @ a.T) @ a) / (2.0 * L * L)
    else:
        g_pair = g_nw * np.sign(p.pairwise) / p.pairwise.size
    return float(penalty), g_u, g_pair


def evaluate_grid(loss_eval, grid):
    return [float(loss_eval(a)) for a in grid]


def grid_search_alpha(loss_eval, grid):
    """Grid point with the smallest finite loss; ties go to the smaller alpha."""
    if not grid:
        raise ValueError("empty alpha grid")
    best, best_loss = None, math.inf
    for a in sorted(grid):
        loss = float(loss_eval(a))
        if not math.isfinite(loss):
            continue
        if best is None or loss < best_loss:
            best, best_loss = a, loss
    if best is None:
        raise FloatingPointError("loss is non-finite at every grid point")
    return best


# ---------------------------------------------------------------------------
# batched training-time transforms
# ---------------------------------------------------------------------------


def normalize_forward(x, alpha, axes):
    """``alpha x / max(||x||, guard)`` per slice; returns ``(y, norm)``."""
    n = np.abs(x).mean(axis=axes, keepdims=True)
    return alpha * x / np.maximum(n, NORM_GUARD), n


def normalize_backward(x, n, alpha, g, axes):
    """Vector-Jacobian product of :func:`normalize_forward`."""
    ng = np.maximum(n, NORM_GUARD)
    count = np.prod([x.shape[a] for a in axes])
    through = (n >= NORM_GUARD).astype(np.float64)
    dot = (g * x).sum(axis=axes, keepdims=True)
    return alpha * g / ng - through * alpha * dot / ng ** 2 * np.sign(x) / count


def chain_transform(state, U, W):
    """Apply ``state`` to a stack of chain potentials.

    Returns ``(U_eff, W_eff, penalty, back)`` where ``penalty`` is the
    per-instance regularizer (zeros unless ``offline_reg``) and
    ``back(gU_eff, gW_eff, penalty_weight)`` returns gradients w.r.t. the raw
    ``U`` and ``W``; ``penalty_weight`` multiplies ``sum(penalty)``.
    """
    mode, a = state.mode, state.alpha
    axes = (1, 2)
    B = U.shape[0]
    if mode in ("none", "online"):
        return a * U, W, np.zeros(B), lambda gu, gw, pw: (a * gu, gw)
    if mode == "temperature":
        return a * U, a * W, np.zeros(B), lambda gu, gw, pw: (a * gu, a * gw)
    if mode == "offline":
        u_eff, nu = normalize_forward(U, a, axes)
        w_eff, nw = normalize_forward(W, 1.0, (0, 1))

        def back(gu, gw, pw):
            return (normalize_backward(U, nu, a, gu, axes),
                    normalize_backward(W, nw, 1.0, gw, (0, 1)))
        return u_eff, w_eff, np.zeros(B), back
    # offline_reg: potentials untouched, ratio penalty per instance
    lam, target = state.reg_lambda, state.reg_alpha
    nu = np.abs(U).mean(axis=axes)
    nw = max(np.abs(W).mean(), NORM_GUARD)
    r = nu / nw
    penalty = lam * (r - target) ** 2
    coef = 2.0 * lam * (r - target)

    def back(gu, gw, pw):
        count = U.shape[1] * U.shape[2]
        gu = gu + pw * coef[:, None, None] * np.sign(U) / (nw * count)
        gw = gw - pw * np.sum(coef * nu) / nw ** 2 * np.sign(W) / W.size
        return gu, gw
    return U, W, penalty, back


def effective_ratio(state, U, W):
    """Mean over instances of ||U_eff|| / ||W_eff|| (the telemetry ratio)."""
    u_eff, w_eff, _, _ = chain_transform(state, U, W)
    nw = np.abs(w_eff).mean()
    if nw == 0:
        return math.inf
    return float(np.mean(np.abs(u_eff).mean(axis=(1, 2)) / nw))
