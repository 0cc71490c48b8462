import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scalecrf import chain_crf
from scalecrf.numerics import (
    CGDivergence,
    LinearOperator,
    conjugate_gradient,
    finite_difference_grad,
    log_softmax,
    log_sum_exp,
    make_rng,
    mean_abs,
    relative_error,
    softmax,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.geomspace(1.0, cond, n)
    return (q * eig) @ q.T


class TestLogSumExp:
    def test_two_equal_terms(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(0.693147, abs=1e-6)

    def test_singleton_is_exact(self):
        assert log_sum_exp([5.0]) == 5.0

    def test_overflow_safe(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2), rel=1e-15)

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty reduction"):
            log_sum_exp([])

    def test_axis_reduction_matches_rowwise(self):
        a = make_rng(0).normal(size=(4, 5))
        np.testing.assert_allclose(log_sum_exp(a, axis=1), [log_sum_exp(r) for r in a])

    @given(arrays(np.float64, st.integers(1, 30), elements=finite))
    def test_bounds(self, v):
        out = log_sum_exp(v)
        assert out >= v.max() - 1e-12
        assert out <= v.max() + math.log(v.size) + 1e-12

    def test_softmax_and_log_softmax_agree(self):
        a = make_rng(1).normal(size=(3, 4)) * 50
        np.testing.assert_allclose(np.exp(log_softmax(a)), softmax(a), atol=1e-15)
        np.testing.assert_allclose(softmax(a).sum(axis=1), 1.0)


class TestConjugateGradient:
    def test_identity(self):
        x, res, iters = conjugate_gradient(LinearOperator.from_matrix(np.eye(3)), [1.0, 2.0, 3.0])
        np.testing.assert_allclose(x, [1, 2, 3])
        assert iters <= 1 and res <= 1e-10

    def test_diagonal(self):
        x, _, _ = conjugate_gradient(LinearOperator.from_matrix(np.diag([2.0, 4.0])), [2.0, 4.0])
        np.testing.assert_allclose(x, [1.0, 1.0])

    def test_random_spd_matches_dense_solve(self):
        rng = make_rng(2)
        a = random_spd(rng, 8)
        b = rng.normal(size=8)
        x, res, _ = conjugate_gradient(LinearOperator.from_matrix(a), b)
        assert relative_error(x, np.linalg.solve(a, b)) < 1e-8
        assert res <= 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_dense_oracle_up_to_dim_16(self, seed):
        rng = make_rng(100 + seed)
        n = int(rng.integers(2, 17))
        a = random_spd(rng, n, cond=100.0)
        b = rng.normal(size=n)
        x, _, _ = conjugate_gradient(LinearOperator.from_matrix(a), b)
        assert relative_error(x, np.linalg.solve(a, b)) < 1e-8

    def test_batched_systems_each_converge(self):
        rng = make_rng(3)
        a = random_spd(rng, 6)
        b = rng.normal(size=(4, 6))
        x, res, _ = conjugate_gradient(LinearOperator.from_matrix(a), b)
        np.testing.assert_allclose(x, np.linalg.solve(a, b.T).T, rtol=1e-8)
        assert res <= 1e-10

    def test_max_iter_returns_last_iterate(self):
        rng = make_rng(4)
        a = random_spd(rng, 10, cond=1e4)
        b = rng.normal(size=10)
        x, res, iters = conjugate_gradient(LinearOperator.from_matrix(a), b, max_iter=2)
        assert iters == 2 and res > 1e-10 and np.all(np.isfinite(x))

    def test_indefinite_operator_raises(self):
        with pytest.raises(CGDivergence, match="CG divergence"):
            conjugate_gradient(LinearOperator.from_matrix(np.diag([1.0, -1.0])), [1.0, 1.0])

    def test_nonpositive_tol_rejected(self):
        with pytest.raises(ValueError):
            conjugate_gradient(LinearOperator.from_matrix(np.eye(2)), [1.0, 1.0], tol=0.0)

    def test_operator_is_linear(self):
        rng = make_rng(5)
        op = LinearOperator.from_matrix(random_spd(rng, 5))
        x, y = rng.normal(size=5), rng.normal(size=5)
        np.testing.assert_allclose(op.apply(2.0 * x - 3.0 * y),
                                   2.0 * op.apply(x) - 3.0 * op.apply(y), atol=1e-10)


class TestFiniteDifference:
    def test_square(self):
        g = finite_difference_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        np.testing.assert_array_equal(finite_difference_grad(lambda x: 1.0, np.zeros(4)), 0.0)

    def test_chain_nll_cross_check(self):
        rng = make_rng(6)
        U, W = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
        y = np.array([0, 1, 1])
        _, gu, gw = chain_crf.loss_nll(chain_crf.ChainPotentials(U, W), y)
        fu = finite_difference_grad(
            lambda u: chain_crf.loss_nll(chain_crf.ChainPotentials(u, W), y)[0], U)
        fw = finite_difference_grad(
            lambda w: chain_crf.loss_nll(chain_crf.ChainPotentials(U, w), y)[0], W)
        assert relative_error(gu, fu) < 1e-5
        assert relative_error(gw, fw) < 1e-5

    def test_non_finite_probe_names_coordinate(self):
        def f(x):
            return math.inf if x[1] > 0.5 else 0.0
        with pytest.raises(FloatingPointError, match=r"\(1,\)"):
            finite_difference_grad(f, np.array([0.0, 0.5]), h=0.1)

    def test_input_not_modified(self):
        x = np.array([1.0, 2.0])
        finite_difference_grad(lambda v: float(v @ v), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])


class TestMeanAbs:
    def test_examples(self):
        assert mean_abs([[1, -1], [2, 0]]) == 1.0
        assert mean_abs(np.zeros((3, 3))) == 0.0
        assert mean_abs([3]) == 3.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            mean_abs([])

    @settings(max_examples=50)
    @given(arrays(np.float64, st.integers(1, 20), elements=finite),
           st.floats(-100, 100, allow_nan=False))
    def test_positively_homogeneous(self, t, a):
        assert mean_abs(a * t) == pytest.approx(abs(a) * mean_abs(t), rel=1e-12, abs=1e-12)


class TestRng:
    def test_pcg64_reproducible(self):
        np.testing.assert_array_equal(make_rng(7).normal(size=5), make_rng(7).normal(size=5))
        assert isinstance(make_rng(7).bit_generator, np.random.PCG64)

    def test_pure_functions_thread_safe(self):
        a = make_rng(8).normal(size=(50, 20))
        expected = log_sum_exp(a, axis=1)
        out = [None] * 8

        def work(k):
            out[k] = log_sum_exp(a, axis=1)
        threads = [threading.Thread(target=work, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for o in out:
            np.testing.assert_array_equal(o, expected)
