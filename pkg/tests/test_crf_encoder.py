import itertools

import numpy as np
import pytest
from scipy.special import logsumexp, softmax

from backend.core.errors import DimensionMismatchError, NumericalError
from backend.core.models import EncoderParams, MeanFieldState, ProposalFeatures, ReconstructionParams
from backend.processing.crf_encoder import coupling_limit, energy, free_energy, gradients, mean_field
from backend.processing.oracle import (
    decoupled, enumerate_exact, exact_gradients, fd_gradient, random_instance, relative_error,
)
from backend.processing.reconstruction import log_gaussian_table


def naive_energy(params, y, features, S_obj, S_int):
    total = 0.0
    for i in range(features.N):
        k = y[i]
        total += params.lambda_uo[k] @ features.F_aug[i] + params.lambda_uh[k] @ features.H_aug[i]
    for i, j in itertools.combinations(range(features.N), 2):
        if y[i] == y[j]:
            k = y[i]
            total += (params.lambda_p_obj[k, 0] * S_obj[i, j] - params.lambda_p_obj[k, 1]
                      + params.lambda_p_int[k, 0] * S_int[i, j] - params.lambda_p_int[k, 1])
    return total


class TestEnergy:
    def test_matches_term_by_term_sum(self, rng):
        params, _, features, S_obj, S_int = random_instance(rng, 5, 3, coupling=2.0)
        for y in itertools.product(range(3), repeat=5):
            assert energy(params, y, features, S_obj, S_int) == pytest.approx(
                naive_energy(params, y, features, S_obj, S_int), abs=1e-12)

    def test_single_node_is_unary(self, rng):
        params, _, features, S_obj, S_int = random_instance(rng, 1, 4)
        assert energy(params, [2], features, S_obj, S_int) == pytest.approx(params.unary(features)[0, 2])

    def test_bad_assignment_raises(self, rng):
        params, _, features, S_obj, S_int = random_instance(rng, 3, 2)
        with pytest.raises(DimensionMismatchError):
            energy(params, [0, 2, 1], features, S_obj, S_int)
        with pytest.raises(DimensionMismatchError):
            energy(params, [0, 1], features, S_obj, S_int)


class TestLogGaussian:
    def test_density_at_mean(self):
        theta = ReconstructionParams(means=np.zeros((1, 2)), variances=np.ones((1, 2)))
        table = log_gaussian_table(np.zeros((1, 2)), theta)
        assert table[0, 0] == pytest.approx(-np.log(2 * np.pi), abs=1e-6)

    def test_one_unit_away(self):
        theta = ReconstructionParams(means=np.zeros((1, 1)), variances=np.ones((1, 1)))
        assert log_gaussian_table([[1.0]], theta)[0, 0] == pytest.approx(-1.418939, abs=1e-6)


class TestMeanField:
    def test_rows_are_distributions(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 6, 3, coupling=1.0)
        state = mean_field(params, theta, features, S_obj, S_int)
        np.testing.assert_allclose(state.Q.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(state.Qp.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(state.Q >= 0) and np.all(state.Qp >= 0)
        assert 1 <= state.sweeps <= 20
        assert len(state.delta_history) == state.sweeps

    def test_single_node_is_exact(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 1, 3)
        state = mean_field(params, theta, features, S_obj, S_int)
        U = params.unary(features)
        G = log_gaussian_table(features.xhat, theta)

        np.testing.assert_allclose(state.Q, softmax(U + G, axis=1), atol=1e-10)
        np.testing.assert_allclose(state.Qp, softmax(U, axis=1), atol=1e-10)
        assert state.sweeps == 1

    def test_negligible_coupling_keeps_initial_marginals(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 5, 2)
        weak = EncoderParams(params.lambda_uo, params.lambda_uh,
                             np.tile([1e-9, 0.0], (2, 1)), np.tile([1e-9, 0.0], (2, 1)))
        state = mean_field(weak, theta, features, S_obj, S_int)
        U = weak.unary(features)

        assert state.sweeps == 1
        np.testing.assert_allclose(state.Qp, softmax(U, axis=1), atol=1e-7)

    def test_close_to_exact_under_weak_coupling(self, rng):
        for n, K in [(4, 2), (5, 3), (6, 2)]:
            params, theta, features, S_obj, S_int = random_instance(rng, n, K)
            state = mean_field(params, theta, features, S_obj, S_int, mf_max_sweeps=50, mf_tol=1e-10)
            exact = enumerate_exact(params, theta, features, S_obj, S_int)
            assert np.max(np.abs(state.Q - exact.marginals)) <= 0.05
            assert np.max(np.abs(state.Qp - exact.marginals_prime)) <= 0.05

    def test_unary_bias_shift_is_invisible(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 4, 3, coupling=0.5)
        uo = np.array(params.lambda_uo)
        uo[:, -1] += 2.5
        shifted = EncoderParams(uo, params.lambda_uh, params.lambda_p_obj, params.lambda_p_int)

        a = mean_field(params, theta, features, S_obj, S_int)
        b = mean_field(shifted, theta, features, S_obj, S_int)
        np.testing.assert_allclose(a.Q, b.Q, atol=1e-12)
        np.testing.assert_allclose(a.Qp, b.Qp, atol=1e-12)

    def test_non_finite_features_name_the_node(self):
        features = ProposalFeatures(F=[[0.0, 0.0], [1.0, 1.0], [np.nan, 0.0]], H=np.zeros((3, 0)))
        params = EncoderParams(np.ones((2, 3)), np.zeros((2, 1)),
                               np.tile([1e-6, 0.0], (2, 1)), np.tile([1e-6, 0.0], (2, 1)))
        theta = ReconstructionParams(np.zeros((2, 2)), np.ones((2, 2)))
        with pytest.raises(NumericalError) as excinfo:
            mean_field(params, theta, features, np.eye(3), np.eye(3))
        assert excinfo.value.node == 2
        assert excinfo.value.exit_code == 3

    def test_table_shape_is_checked(self, rng):
        params, theta, features, _, _ = random_instance(rng, 3, 2)
        with pytest.raises(DimensionMismatchError):
            mean_field(params, theta, features, np.eye(2), np.eye(3))


class TestCouplingLimit:
    LOWER = np.array([1e-6, 0.0, 1e-6, 0.0])

    def limited(self, params, limit):
        blocks = limit.project(np.hstack([params.lambda_p_obj, params.lambda_p_int]),
                               np.ones((params.K, 4)), self.LOWER)
        return EncoderParams(params.lambda_uo, params.lambda_uh, blocks[:, :2], blocks[:, 2:])

    def test_row_sums_ignore_the_diagonal(self):
        S = np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.0], [0.25, 0.0, 1.0]])
        limit = coupling_limit(S, np.eye(3), 0.25)
        assert limit.obj_row_sum == pytest.approx(0.75)
        assert limit.int_row_sum == 0.0
        assert limit.others == 2
        assert limit.budget == 0.5

    def test_feasible_blocks_are_untouched(self, rng):
        params, _, _, S_obj, S_int = random_instance(rng, 5, 3, coupling=1e-3)
        limit = coupling_limit(S_obj, S_int, 0.25)
        blocks = np.hstack([params.lambda_p_obj, params.lambda_p_int])
        assert np.all(limit.contraction_bound(params) <= 0.25)
        np.testing.assert_array_equal(limit.project(blocks, rng.uniform(0.1, 2.0, size=(3, 4)),
                                                    np.zeros(4)), blocks)

    def test_projection_meets_the_budget(self, rng):
        params, _, _, S_obj, S_int = random_instance(rng, 20, 3, coupling=20.0)
        limit = coupling_limit(S_obj, S_int, 0.25)
        assert np.all(limit.contraction_bound(params) > 0.25)

        projected = self.limited(params, limit)
        np.testing.assert_allclose(limit.contraction_bound(projected), 0.25, rtol=1e-9)
        assert np.all(limit.contraction_bound(projected) <= 0.25)
        assert projected.constraint_violations(1e-6) == []

    def test_projection_is_the_closest_feasible_point(self, rng):
        limit = coupling_limit(*random_instance(rng, 12, 1)[3:], 0.2)
        target = rng.uniform(0.0, 1.0, size=(1, 4))
        rates = rng.uniform(0.1, 2.0, size=(1, 4))
        best = limit.project(target, rates, self.LOWER)[0]
        a = limit.coefficients

        def distance(y):
            return float(np.sum((y - target[0]) ** 2 / rates[0]))

        for _ in range(500):
            candidate = self.LOWER + rng.uniform(0.0, 1.0, size=4)
            excess = candidate @ a
            if excess > limit.budget:
                candidate = self.LOWER + (candidate - self.LOWER) * (limit.budget - self.LOWER @ a) \
                    / (excess - self.LOWER @ a)
            assert distance(best) <= distance(candidate) + 1e-9

    def test_limited_mean_field_contracts_every_sweep(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 30, 3, coupling=20.0)
        limit = coupling_limit(S_obj, S_int, 0.25)
        state = mean_field(self.limited(params, limit), theta, features, S_obj, S_int,
                           mf_max_sweeps=15, mf_tol=0.0)

        history = np.array(state.delta_history)
        assert state.sweeps == 15
        assert np.all(history[1:] <= 0.25 * history[:-1] + 1e-12)
        assert history[9] <= 0.25 ** 9


class TestGradients:
    def test_zero_when_chains_agree(self, rng):
        _, _, features, S_obj, S_int = random_instance(rng, 4, 3)
        Q = softmax(rng.normal(size=(4, 3)), axis=1)
        state = MeanFieldState(Q=Q, Qp=Q, S_obj=S_obj, S_int=S_int)
        np.testing.assert_array_equal(gradients(state, features).to_vector(), 0.0)

    def test_single_node_unary_gradient(self, rng):
        _, _, features, S_obj, S_int = random_instance(rng, 1, 2)
        Q, Qp = np.array([[0.7, 0.3]]), np.array([[0.4, 0.6]])
        grads = gradients(MeanFieldState(Q=Q, Qp=Qp, S_obj=S_obj, S_int=S_int), features)

        np.testing.assert_allclose(grads.lambda_uo, (Q - Qp).T @ features.F_aug, atol=1e-15)
        np.testing.assert_array_equal(grads.lambda_p_obj, 0.0)
        np.testing.assert_array_equal(grads.lambda_p_int, 0.0)

    def test_pair_terms_count_each_pair_once(self):
        features = ProposalFeatures(F=np.zeros((2, 1)), H=np.zeros((2, 0)))
        S = np.array([[1.0, 0.5], [0.5, 1.0]])
        Q = np.array([[1.0, 0.0], [1.0, 0.0]])
        Qp = np.full((2, 2), 0.5)
        grads = gradients(MeanFieldState(Q=Q, Qp=Qp, S_obj=S, S_int=np.eye(2)), features)

        assert grads.lambda_p_obj[0, 0] == pytest.approx(0.5 * (1.0 - 0.25))
        assert grads.lambda_p_obj[0, 1] == pytest.approx(-(1.0 - 0.25))
        assert grads.lambda_p_obj[1, 0] == pytest.approx(-0.5 * 0.25)
        assert grads.lambda_p_int[0, 0] == 0.0

    def test_matches_finite_differences_when_decoupled(self, rng):
        for n in (4, 5):
            params, theta, features, S_obj, S_int = random_instance(rng, n, 2)
            free = decoupled(params)
            state = mean_field(free, theta, features, S_obj, S_int, mf_max_sweeps=50, mf_tol=1e-12)
            numeric = fd_gradient(free, theta, features, S_obj, S_int)
            assert relative_error(gradients(state, features).to_vector(), numeric) < 1e-4

    def test_close_to_exact_gradient_under_weak_coupling(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 5, 2, coupling=0.05)
        state = mean_field(params, theta, features, S_obj, S_int, mf_max_sweeps=50, mf_tol=1e-12)
        approx = gradients(state, features).to_vector()
        exact = exact_gradients(params, theta, features, S_obj, S_int).to_vector()
        assert np.max(np.abs(approx - exact)) <= 0.1


class TestFreeEnergy:
    def test_single_node_is_exact(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 1, 3)
        state = mean_field(params, theta, features, S_obj, S_int)
        log_z, log_zp = free_energy(state, params, theta, features)
        U = params.unary(features)
        G = log_gaussian_table(features.xhat, theta)

        assert log_z == pytest.approx(float(logsumexp(U + G)), abs=1e-10)
        assert log_zp == pytest.approx(float(logsumexp(U)), abs=1e-10)

    def test_single_cluster_is_exact(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 4, 1, coupling=1.0)
        state = mean_field(params, theta, features, S_obj, S_int)
        log_z, log_zp = free_energy(state, params, theta, features)
        phi = energy(params, np.zeros(4, dtype=int), features, S_obj, S_int)
        G = log_gaussian_table(features.xhat, theta)

        assert log_zp == pytest.approx(phi, abs=1e-10)
        assert log_z == pytest.approx(phi + G.sum(), abs=1e-10)

    def test_lower_bound_close_to_exact(self, rng):
        params, theta, features, S_obj, S_int = random_instance(rng, 6, 2)
        state = mean_field(params, theta, features, S_obj, S_int, mf_max_sweeps=50, mf_tol=1e-10)
        log_z, log_zp = free_energy(state, params, theta, features)
        exact = enumerate_exact(params, theta, features, S_obj, S_int)

        assert log_z <= exact.log_Z + 1e-9
        assert log_zp <= exact.log_Zprime + 1e-9
        assert abs(log_z - exact.log_Z) <= 0.02 * abs(exact.log_Z)
