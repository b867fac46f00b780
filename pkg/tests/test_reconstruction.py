import numpy as np
import pytest

from backend.core.errors import DimensionMismatchError
from backend.core.models import ReconstructionParams
from backend.processing.reconstruction import (
    em_update, farthest_point_init, global_variance, log_gaussian, log_gaussian_table,
)


class TestLogGaussian:
    def test_standard_normal_at_mean(self):
        theta = ReconstructionParams(np.zeros((1, 2)), np.ones((1, 2)))
        assert log_gaussian([0.0, 0.0], 0, theta) == pytest.approx(-1.837877, abs=1e-6)

    def test_one_dimension_one_unit_away(self):
        theta = ReconstructionParams(np.zeros((1, 1)), np.ones((1, 1)))
        assert log_gaussian([1.0], 0, theta) == pytest.approx(-1.418939, abs=1e-6)

    def test_table_matches_single_entries(self, rng):
        theta = ReconstructionParams(rng.normal(size=(3, 4)), rng.uniform(0.2, 3.0, (3, 4)))
        X = rng.normal(size=(6, 4))
        table = log_gaussian_table(X, theta)
        for i in range(6):
            for k in range(3):
                assert table[i, k] == pytest.approx(log_gaussian(X[i], k, theta), rel=1e-12)

    def test_dimension_mismatch(self):
        theta = ReconstructionParams(np.zeros((1, 2)), np.ones((1, 2)))
        with pytest.raises(DimensionMismatchError):
            log_gaussian([0.0, 0.0, 0.0], 0, theta)


class TestEmUpdate:
    def test_all_mass_on_one_cluster(self, rng):
        X = rng.normal(size=(10, 3))
        Q = np.zeros((10, 2))
        Q[:, 0] = 1.0
        theta = em_update(Q, X, variance_floor=1e-6)

        np.testing.assert_allclose(theta.means[0], X.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(theta.variances[0], np.maximum(X.var(axis=0), 1e-6), atol=1e-12)

    def test_uniform_responsibilities_give_the_midpoint(self):
        X = np.array([[0.0, 2.0], [4.0, 6.0]])
        theta = em_update(np.full((2, 2), 0.5), X, variance_floor=1e-6)
        np.testing.assert_allclose(theta.means, [[2.0, 4.0], [2.0, 4.0]])
        np.testing.assert_allclose(theta.variances, [[4.0, 4.0], [4.0, 4.0]])

    def test_matches_weighted_moments(self, rng):
        X = rng.normal(size=(25, 4))
        Q = rng.dirichlet(np.ones(3), size=25)
        theta = em_update(Q, X, variance_floor=1e-6)
        for k in range(3):
            w = Q[:, k] / Q[:, k].sum()
            mean = np.sum(w[:, None] * X, axis=0)
            var = np.sum(w[:, None] * (X - mean) ** 2, axis=0)
            np.testing.assert_allclose(theta.means[k], mean, atol=1e-10)
            np.testing.assert_allclose(theta.variances[k], np.maximum(var, 1e-6), atol=1e-10)

    def test_variance_floor(self):
        X = np.ones((4, 2))
        theta = em_update(np.ones((4, 1)), X, variance_floor=0.01)
        np.testing.assert_array_equal(theta.variances, 0.01)

    def test_empty_cluster_is_revived(self):
        X = np.array([[0.0], [1.0], [10.0]])
        Q = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.0, 1.0, 0.0]])
        theta = em_update(Q, X, variance_floor=1e-6)

        # proposal 1 has the lowest maximum responsibility
        assert theta.means[2, 0] == 1.0
        np.testing.assert_allclose(theta.variances[2], global_variance(X, 1e-6))
        assert np.all(np.isfinite(theta.means)) and np.all(theta.variances > 0)

    def test_row_mismatch_raises(self):
        with pytest.raises(DimensionMismatchError):
            em_update(np.ones((3, 1)), np.zeros((2, 2)), 1e-6)


class TestFarthestPointInit:
    def test_second_mean_is_farthest_from_first(self, rng):
        X = rng.normal(size=(30, 2))
        theta = farthest_point_init(X, 2, 1e-6, seed=3)
        first = theta.means[0]
        distances = np.sum((X - first) ** 2, axis=1)
        np.testing.assert_array_equal(theta.means[1], X[np.argmax(distances)])

    def test_is_seeded(self, rng):
        X = rng.normal(size=(30, 2))
        a = farthest_point_init(X, 4, 1e-6, seed=11)
        b = farthest_point_init(X, 4, 1e-6, seed=11)
        np.testing.assert_array_equal(a.means, b.means)
        assert len({tuple(m) for m in a.means}) == 4

    def test_starts_from_global_variance(self, rng):
        X = rng.normal(size=(30, 3))
        theta = farthest_point_init(X, 2, 1e-6, seed=0)
        np.testing.assert_allclose(theta.variances, np.tile(X.var(axis=0), (2, 1)))

    def test_too_few_points(self):
        with pytest.raises(DimensionMismatchError):
            farthest_point_init(np.zeros((2, 1)), 3, 1e-6, seed=0)
