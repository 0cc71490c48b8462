import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    chain_score,
    enumerate_chain,
    enumerate_loss_augmented,
    enumerate_map,
    mean_field_reference,
    unique_maximizer,
)
from scalecrf import chain_crf
from scalecrf.chain_crf import ChainPotentials
from scalecrf.numerics import finite_difference_grad, make_rng, relative_error, softmax


def random_instance(rng, L=None, M=None, scale=1.0):
    L = int(rng.integers(1, 7)) if L is None else L
    M = int(rng.integers(2, 5)) if M is None else M
    return ChainPotentials(scale * rng.normal(size=(L, M)), scale * rng.normal(size=(M, M)))


def fd_grads(loss_fn, p, y):
    fu = finite_difference_grad(lambda u: loss_fn(ChainPotentials(u, p.pairwise), y)[0], p.unary)
    fw = finite_difference_grad(lambda w: loss_fn(ChainPotentials(p.unary, w), y)[0], p.pairwise)
    return fu, fw


class TestPotentials:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ChainPotentials(np.zeros((3, 2)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            ChainPotentials(np.zeros((3, 1)), np.zeros((1, 1)))
        with pytest.raises(ValueError):
            ChainPotentials(np.full((2, 2), np.nan), np.zeros((2, 2)))

    def test_immutable(self):
        p = ChainPotentials(np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            p.unary[0, 0] = 1.0


class TestScore:
    def test_zero_potentials(self):
        p = ChainPotentials(np.zeros((4, 3)), np.zeros((3, 3)))
        assert chain_crf.score(p, [0, 2, 1, 1]) == 0.0

    def test_single_position(self):
        p = ChainPotentials([[0.5, -2.0]], [[7.0, 1.0], [3.0, 4.0]])
        assert chain_crf.score(p, [1]) == -2.0

    def test_matches_resummation(self):
        rng = make_rng(0)
        p = random_instance(rng, 3, 2)
        for y in ([0, 0, 0], [1, 0, 1], [0, 1, 1]):
            assert chain_crf.score(p, y) == pytest.approx(
                chain_score(p.unary, p.pairwise, np.array(y)), rel=1e-14)

    def test_label_out_of_range(self):
        p = ChainPotentials(np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError, match="out of range"):
            chain_crf.score(p, [0, 2])
        with pytest.raises(ValueError):
            chain_crf.score(p, [0, 1, 1])


class TestForwardBackward:
    def test_uniform_model(self):
        res = chain_crf.forward_backward(ChainPotentials(np.zeros((2, 2)), np.zeros((2, 2))))
        assert res.log_partition == pytest.approx(math.log(4), abs=1e-12)
        np.testing.assert_allclose(res.unary_marginals, 0.5)

    def test_small_instance_frozen(self):
        # enumeration over the 4 labelings: Z = (e + 1)^2
        res = chain_crf.forward_backward(ChainPotentials([[1.0, 0.0], [0.0, 1.0]], np.zeros((2, 2))))
        assert res.log_partition == pytest.approx(2.6265233750364456, rel=1e-12)
        np.testing.assert_allclose(res.unary_marginals,
                                   [[0.7310585786300049, 0.2689414213699951],
                                    [0.2689414213699951, 0.7310585786300049]], rtol=1e-12)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_enumeration(self, seed):
        p = random_instance(make_rng(seed))
        log_z, unary, pair, _, _ = enumerate_chain(p.unary, p.pairwise)
        res = chain_crf.forward_backward(p)
        assert res.log_partition == pytest.approx(log_z, rel=1e-9)
        np.testing.assert_allclose(res.unary_marginals, unary, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(res.pairwise_marginals, pair, rtol=1e-9, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0.1, 30.0))
    def test_marginal_consistency(self, seed, scale):
        p = random_instance(make_rng(seed), scale=scale)
        res = chain_crf.forward_backward(p)
        np.testing.assert_allclose(res.unary_marginals.sum(axis=1), 1.0, atol=1e-10)
        if p.length > 1:
            np.testing.assert_allclose(res.pairwise_marginals.sum(axis=(1, 2)), 1.0, atol=1e-10)
            np.testing.assert_allclose(res.pairwise_marginals.sum(axis=2),
                                       res.unary_marginals[:-1], atol=1e-9)
            np.testing.assert_allclose(res.pairwise_marginals.sum(axis=1),
                                       res.unary_marginals[1:], atol=1e-9)

    def test_large_potentials_stay_finite(self):
        p = ChainPotentials(256.0 * make_rng(1).normal(size=(20, 5)),
                            256.0 * make_rng(2).normal(size=(5, 5)))
        res = chain_crf.forward_backward(p)
        assert np.isfinite(res.log_partition)
        assert np.all(np.isfinite(res.unary_marginals))


class TestMapDecode:
    def test_factorized(self):
        U = np.array([[0.0, 2.0, 2.0], [3.0, 1.0, 0.0], [-1.0, -1.0, 0.5]])
        y, best = chain_crf.map_decode(ChainPotentials(U, np.zeros((3, 3))))
        np.testing.assert_array_equal(y, [1, 0, 2])
        assert best == pytest.approx(5.5)

    def test_zero_potentials_tie_break(self):
        y, _ = chain_crf.map_decode(ChainPotentials(np.zeros((5, 4)), np.zeros((4, 4))))
        np.testing.assert_array_equal(y, 0)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_enumeration(self, seed):
        p = random_instance(make_rng(seed))
        y_ref, best_ref, _ = enumerate_map(p.unary, p.pairwise)
        y, best = chain_crf.map_decode(p)
        np.testing.assert_array_equal(y, y_ref)
        assert best == pytest.approx(best_ref, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_beats_random_labelings(self, seed):
        rng = make_rng(seed)
        p = random_instance(rng, L=12, M=4)
        _, best = chain_crf.map_decode(p)
        for _ in range(100):
            assert best >= chain_crf.score(p, rng.integers(0, 4, size=12)) - 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_temperature_invariance(self, seed):
        p = random_instance(make_rng(seed), L=5, M=3)
        _, _, scores = enumerate_map(p.unary, p.pairwise)
        if not unique_maximizer(scores):
            pytest.skip("tied maximizer")
        y, _ = chain_crf.map_decode(p)
        for a in (0.1, 3.0, 40.0):
            ya, _ = chain_crf.map_decode(ChainPotentials(a * p.unary, a * p.pairwise))
            np.testing.assert_array_equal(ya, y)


class TestMeanField:
    def test_factorized_fixed_point(self):
        rng = make_rng(0)
        U = rng.normal(size=(4, 3))
        for sweeps in (1, 5):
            q = chain_crf.mean_field(ChainPotentials(U, np.zeros((3, 3))), sweeps)
            np.testing.assert_allclose(q, softmax(U, axis=1), atol=1e-15)

    def test_zero_potentials_uniform(self):
        q = chain_crf.mean_field(ChainPotentials(np.zeros((3, 4)), np.zeros((4, 4))), 3)
        np.testing.assert_allclose(q, 0.25)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference_fixed_point(self, seed):
        p = random_instance(make_rng(seed), L=3, M=2)
        q = chain_crf.mean_field(p, 50)
        np.testing.assert_allclose(q, mean_field_reference(p.unary, p.pairwise, 50), atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_when_factorized(self, seed):
        U = make_rng(seed).normal(size=(5, 3))
        p = ChainPotentials(U, np.zeros((3, 3)))
        np.testing.assert_allclose(chain_crf.mean_field(p, 10),
                                   chain_crf.forward_backward(p).unary_marginals, atol=1e-12)

    def test_sweeps_validated(self):
        with pytest.raises(ValueError):
            chain_crf.mean_field(ChainPotentials(np.zeros((2, 2)), np.zeros((2, 2))), 0)


class TestLossNll:
    def test_uniform_value(self):
        loss, _, _ = chain_crf.loss_nll(ChainPotentials(np.zeros((2, 2)), np.zeros((2, 2))), [0, 1])
        assert loss == pytest.approx(math.log(4))

    @pytest.mark.parametrize("seed", range(5))
    def test_unary_grad_rows_sum_to_zero(self, seed):
        rng = make_rng(seed)
        p = random_instance(rng)
        _, gu, _ = chain_crf.loss_nll(p, rng.integers(0, p.n_labels, size=p.length))
        np.testing.assert_allclose(gu.sum(axis=1), 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_finite_differences(self, seed):
        rng = make_rng(seed)
        p = random_instance(rng, L=4, M=3)
        y = rng.integers(0, 3, size=4)
        _, gu, gw = chain_crf.loss_nll(p, y)
        fu, fw = fd_grads(chain_crf.loss_nll, p, y)
        assert relative_error(gu, fu) < 1e-5
        assert relative_error(gw, fw) < 1e-5

    def test_value_matches_enumeration(self):
        rng = make_rng(3)
        p = random_instance(rng, L=4, M=3)
        y = np.array([2, 0, 0, 1])
        log_z, *_ = enumerate_chain(p.unary, p.pairwise)
        loss, _, _ = chain_crf.loss_nll(p, y)
        assert loss == pytest.approx(log_z - chain_score(p.unary, p.pairwise, y), rel=1e-10)


class TestLossCe:
    def test_uniform_value(self):
        for M in (2, 5):
            p = ChainPotentials(np.zeros((3, M)), np.zeros((M, M)))
            assert chain_crf.loss_ce(p, [0, 1, 0])[0] == pytest.approx(math.log(M))
            assert chain_crf.loss_ce(p, [0, 1, 0], 10)[0] == pytest.approx(math.log(M))

    @pytest.mark.parametrize("seed", range(20))
    def test_exact_gradient_finite_differences(self, seed):
        rng = make_rng(seed)
        p = random_instance(rng, L=3, M=2)
        y = rng.integers(0, 2, size=3)
        _, gu, gw = chain_crf.loss_ce(p, y)
        fu, fw = fd_grads(chain_crf.loss_ce, p, y)
        assert relative_error(gu, fu) < 1e-4
        assert relative_error(gw, fw) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_mean_field_gradient_finite_differences(self, seed):
        rng = make_rng(seed)
        p = random_instance(rng, L=4, M=3)
        y = rng.integers(0, 3, size=4)
        loss_fn = lambda q, yy: chain_crf.loss_ce(q, yy, 10)  # noqa: E731
        _, gu, gw = loss_fn(p, y)
        fu, fw = fd_grads(loss_fn, p, y)
        assert relative_error(gu, fu) < 1e-4
        assert relative_error(gw, fw) < 1e-4

    def test_exact_value_matches_enumeration(self):
        p = random_instance(make_rng(4), L=4, M=3)
        y = np.array([1, 1, 0, 2])
        _, unary, _, _, _ = enumerate_chain(p.unary, p.pairwise)
        expected = -np.mean(np.log(unary[np.arange(4), y]))
        assert chain_crf.loss_ce(p, y)[0] == pytest.approx(expected, rel=1e-10)

    def test_mean_field_factorized_reduces_to_softmax_ce(self):
        # The loss and unary gradient collapse to per-position softmax CE when
        # W = 0.  The W gradient does not vanish: perturbing W couples the
        # positions, which the finite-difference oracle confirms.
        rng = make_rng(5)
        U = rng.normal(size=(3, 2))
        y = np.array([0, 1, 0])
        p = ChainPotentials(U, np.zeros((2, 2)))
        loss, gu, gw = chain_crf.loss_ce(p, y, 10)
        q = softmax(U, axis=1)
        assert loss == pytest.approx(-np.mean(np.log(q[np.arange(3), y])), rel=1e-12)
        np.testing.assert_allclose(gu, (q - np.eye(2)[y]) / 3, atol=1e-12)
        _, fw = fd_grads(lambda a, b: chain_crf.loss_ce(a, b, 10), p, y)
        assert relative_error(gw, fw) < 1e-6


class TestHamming:
    def test_examples(self):
        assert chain_crf.hamming_margin([1, 2, 3], [1, 2, 3]) == 0.0
        assert chain_crf.hamming_margin([1, 2, 3], [1, 2, 2]) == pytest.approx(1 / 3)
        assert chain_crf.hamming_margin([0, 0], [1, 1]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            chain_crf.hamming_margin([1, 2], [1, 2, 3])


class TestLossSsvm:
    def test_zero_potentials(self):
        y = np.array([0, 1, 1, 0])
        loss, _, _, y_star = chain_crf.loss_ssvm(ChainPotentials(np.zeros((4, 2)), np.zeros((2, 2))), y)
        assert loss == pytest.approx(1.0)
        np.testing.assert_array_equal(y_star, 1 - y)

    def test_satisfied_margin(self):
        y = np.array([1, 0, 1])
        U = 10.0 * np.eye(2)[y]
        loss, gu, gw, y_star = chain_crf.loss_ssvm(ChainPotentials(U, np.zeros((2, 2))), y)
        assert loss == 0.0
        np.testing.assert_array_equal(y_star, y)
        np.testing.assert_array_equal(gu, 0.0)
        np.testing.assert_array_equal(gw, 0.0)

    @pytest.mark.parametrize("seed", range(30))
    def test_augmented_argmax_matches_enumeration(self, seed):
        rng = make_rng(seed)
        p = random_instance(rng, L=int(rng.integers(1, 6)), M=int(rng.integers(2, 4)))
        y = rng.integers(0, p.n_labels, size=p.length)
        ref, ref_val = enumerate_loss_augmented(p.unary, p.pairwise, y)
        loss, _, _, y_star = chain_crf.loss_ssvm(p, y)
        np.testing.assert_array_equal(y_star, ref)
        assert loss == pytest.approx(ref_val - chain_score(p.unary, p.pairwise, y), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_subgradient_finite_differences(self, seed):
        # away from ties the hinge is locally linear, so FD recovers the subgradient
        rng = make_rng(seed)
        p = random_instance(rng, L=4, M=3)
        y = rng.integers(0, 3, size=4)
        _, gu, gw, _ = chain_crf.loss_ssvm(p, y)
        fn = lambda q, yy: chain_crf.loss_ssvm(q, yy)[:1]  # noqa: E731
        fu, fw = fd_grads(fn, p, y)
        assert relative_error(gu, fu) < 1e-4
        assert relative_error(gw, fw) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_nonnegative_and_zero_iff_correct(self, seed):
        rng = make_rng(seed)
        p = random_instance(rng, L=4, M=3)
        y = rng.integers(0, 3, size=4)
        loss, _, _, y_star = chain_crf.loss_ssvm(p, y)
        assert loss >= 0.0
        assert (loss == 0.0) == bool(np.array_equal(y_star, y))


class TestBatchKernels:
    def test_batch_matches_single(self):
        rng = make_rng(9)
        U = rng.normal(size=(4, 5, 3))
        W = rng.normal(size=(3, 3))
        Y = rng.integers(0, 3, size=(4, 5))
        loss, gU, gW = chain_crf.batch_loss_ce(U, W, Y)
        gW_sum = np.zeros_like(W)
        for b in range(4):
            l, gu, gw = chain_crf.loss_ce(ChainPotentials(U[b], W), Y[b])
            assert loss[b] == pytest.approx(l, rel=1e-13)
            np.testing.assert_allclose(gU[b], gu, atol=1e-14)
            gW_sum += gw
        np.testing.assert_allclose(gW, gW_sum, atol=1e-13)
