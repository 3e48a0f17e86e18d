import numpy as np
import pytest

from ddminmax.numerics import (CostWeights, DimError, InvalidMatrix, NotPsd, is_psd,
                               min_eigenvalue, sqrt_factor, weighted_norm_sq)


class TestMinEigenvalue:
    def test_identity(self):
        assert min_eigenvalue(np.eye(4)) == 1.0

    def test_state_constraint_matrix(self):
        assert min_eigenvalue(np.diag([2500.0, 1.0, 400.0, 1.0])) == pytest.approx(1.0)

    def test_suspension_weight(self):
        assert min_eigenvalue(100.0 * np.eye(4)) == pytest.approx(100.0)

    def test_non_finite(self):
        with pytest.raises(InvalidMatrix):
            min_eigenvalue(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_non_square(self):
        with pytest.raises(InvalidMatrix):
            min_eigenvalue(np.ones((2, 3)))


class TestIsPsd:
    def test_zero_matrix_is_on_the_cone(self):
        assert is_psd(np.zeros((3, 3)), 0.0)

    def test_negative_beyond_tol(self):
        assert not is_psd(np.diag([1.0, -1e-6]), 1e-8)

    def test_negative_within_tol(self):
        assert is_psd(np.diag([1.0, -1e-9]), 1e-8)

    def test_negative_tol_rejected(self):
        with pytest.raises(ValueError):
            is_psd(np.eye(2), -1.0)


class TestSqrtFactor:
    def test_identity(self):
        np.testing.assert_allclose(sqrt_factor(np.eye(2)), np.eye(2))

    def test_diagonal(self):
        np.testing.assert_allclose(sqrt_factor(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_suspension_weight(self):
        np.testing.assert_allclose(sqrt_factor(100.0 * np.eye(4)), 10.0 * np.eye(4))

    def test_symmetric_root(self):
        M = np.array([[2.0, 1.0], [1.0, 2.0]])
        S = sqrt_factor(M)
        np.testing.assert_allclose(S, S.T)
        np.testing.assert_allclose(S.T @ S, M, atol=1e-12)

    def test_indefinite(self):
        with pytest.raises(NotPsd):
            sqrt_factor(np.diag([1.0, -1.0]))


class TestWeightedNorm:
    def test_zero_vector(self):
        assert weighted_norm_sq(np.zeros(3), np.eye(3)) == 0.0

    def test_coordinate_vector(self):
        assert weighted_norm_sq([1.0, 0.0], np.diag([3.0, 7.0])) == 3.0

    def test_scalar_weight(self):
        assert weighted_norm_sq([-1.0], [[1.0]]) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimError):
            weighted_norm_sq([1.0, 2.0], np.eye(3))


class TestCostWeights:
    def test_factors_reconstruct(self):
        w = CostWeights(100.0 * np.eye(4), np.eye(1))
        np.testing.assert_allclose(w.M_Q.T @ w.M_Q, w.Q, rtol=1e-12)
        np.testing.assert_allclose(w.M_R.T @ w.M_R, w.R, rtol=1e-12)

    def test_requires_definite(self):
        with pytest.raises(NotPsd):
            CostWeights(np.zeros((1, 1)), np.eye(1))

    def test_stage_cost(self):
        w = CostWeights(np.eye(1), 0.1 * np.eye(1))
        assert w.stage_cost([0.0], [-1.0]) == pytest.approx(1.0)
