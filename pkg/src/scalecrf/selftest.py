"""Quick oracle checks runnable from an installed package (``scalecrf selftest``).

Each check compares an implementation against an independent route:
brute-force enumeration, central finite differences, or a dense solve.
"""

import itertools
import math

import numpy as np

from . import chain_crf, gcrf
from .numerics import finite_difference_grad, log_sum_exp, make_rng, relative_error
from .scaling import grid_search_alpha


def _random_chain(rng, L, M, scale=1.0):
    return chain_crf.ChainPotentials(scale * rng.normal(size=(L, M)),
                                     scale * rng.normal(size=(M, M)))


def _enumerate(p):
    L, M = p.length, p.n_labels
    ys = [np.array(y) for y in itertools.product(range(M), repeat=L)]
    scores = np.array([chain_crf.score(p, y) for y in ys])
    return ys, scores


def check_partition(rng, n=20):
    worst = 0.0
    for _ in range(n):
        p = _random_chain(rng, int(rng.integers(1, 6)), int(rng.integers(2, 4)))
        _, scores = _enumerate(p)
        worst = max(worst, relative_error(chain_crf.forward_backward(p).log_partition,
                                          log_sum_exp(scores)))
    return worst < 1e-9, f"max rel err {worst:.2e}"


def check_map(rng, n=20):
    for _ in range(n):
        p = _random_chain(rng, int(rng.integers(1, 6)), int(rng.integers(2, 4)))
        ys, scores = _enumerate(p)
        y, _ = chain_crf.map_decode(p)
        if not np.array_equal(y, ys[int(np.argmax(scores))]):
            return False, "MAP differs from enumeration"
    return True, f"{n} instances"


def check_gradients(rng):
    p = _random_chain(rng, 4, 3)
    y = rng.integers(0, 3, size=4)
    worst = 0.0
    for loss in (chain_crf.loss_nll, chain_crf.loss_ce):
        _, gu, gw = loss(p, y)
        fu = finite_difference_grad(
            lambda u: loss(chain_crf.ChainPotentials(u, p.pairwise), y)[0], p.unary)
        fw = finite_difference_grad(
            lambda w: loss(chain_crf.ChainPotentials(p.unary, w), y)[0], p.pairwise)
        worst = max(worst, relative_error(gu, fu), relative_error(gw, fw))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def check_gcrf(rng):
    L, d = 6, 3
    a = rng.normal(size=(L, d)) * 0.2
    sys_ = gcrf.GcrfSystem(rng.normal(size=2 * L), a, 1.0)
    s = gcrf.solve_scores(sys_)
    K = gcrf.dense_pairwise(a) + np.eye(2 * L)
    dense = np.linalg.solve(K, sys_.unary)
    err = relative_error(s, dense)
    res = np.linalg.norm(K @ s - sys_.unary) / np.linalg.norm(sys_.unary)
    return err < 1e-8 and res <= 1e-8, f"rel err vs dense {err:.2e}, residual {res:.1e}"


def check_grid(rng):
    target = float(2.0 ** rng.integers(-8, 9))
    grid = [2.0 ** t for t in range(-8, 9)]
    best = grid_search_alpha(lambda a: (math.log2(a) - math.log2(target)) ** 2, grid)
    return best == target, f"picked {best:g} for target {target:g}"


CHECKS = [
    ("log-partition vs enumeration", check_partition),
    ("MAP vs enumeration", check_map),
    ("NLL/CE gradients vs finite differences", check_gradients),
    ("GCRF CG solve vs dense solve", check_gcrf),
    ("alpha grid search exhaustive", check_grid),
]


def run_selftest(seed=0):
    """Returns a list of ``(name, ok, detail)``."""
    rng = make_rng(seed)
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # report, don't crash the whole suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
