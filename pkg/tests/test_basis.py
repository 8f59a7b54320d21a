"""Tests for the spline basis and penalty decomposition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stapdp.basis import (
    build_basis,
    curve_on_grid,
    difference_matrix,
    difference_penalty,
    exposure_matrix,
    exposure_row,
)


@pytest.fixture
def basis():
    return build_basis(degree=3, n_basis=10, radius=1.0)


@pytest.fixture
def decomp():
    return difference_penalty(10, order=2)


class TestDifferenceMatrix:
    def test_second_order_oracle(self):
        """Hand-computed second difference matrix for four coefficients."""
        expected = np.array([[1.0, -2.0, 1.0, 0.0], [0.0, 1.0, -2.0, 1.0]])
        assert np.array_equal(difference_matrix(4, 2), expected)

    def test_first_order_rows_sum_to_zero(self):
        mat = difference_matrix(6, 1)
        assert mat.shape == (5, 6)
        assert np.all(mat.sum(axis=1) == 0)

    def test_annihilates_low_degree_polynomials(self):
        """Order-d differences kill coefficient vectors of degree < d."""
        mat = difference_matrix(8, 2)
        assert np.allclose(mat @ np.ones(8), 0.0)
        assert np.allclose(mat @ np.arange(8.0), 0.0)
        assert not np.allclose(mat @ np.arange(8.0) ** 2, 0.0)


class TestSplineBasis:
    def test_partition_of_unity(self, basis):
        """Cubic B-splines on [0, R] sum to one at every distance."""
        d = np.linspace(0.0, 1.0, 257)
        rows = basis.evaluate(d)
        assert rows.shape == (257, 10)
        assert np.allclose(rows.sum(axis=1), 1.0)

    def test_rows_nonnegative(self, basis):
        rows = basis.evaluate(np.linspace(0.0, 1.0, 101))
        assert np.all(rows >= 0.0)

    def test_boundary_points_valid(self, basis):
        rows = basis.evaluate(np.array([0.0, 1.0]))
        assert np.all(np.isfinite(rows))
        assert np.allclose(rows.sum(axis=1), 1.0)

    def test_rejects_out_of_domain(self, basis):
        with pytest.raises(ValueError):
            basis.evaluate(np.array([1.0 + 1e-6]))
        with pytest.raises(ValueError):
            basis.evaluate(np.array([-0.01]))

    def test_reproduces_cubic_exactly(self, basis):
        """A cubic polynomial lies in the span of a cubic spline basis."""
        d = np.linspace(0.0, 1.0, 200)
        target = 1.0 - 3.0 * d**2 + 2.0 * d**3
        rows = basis.evaluate(d)
        coef, *_ = np.linalg.lstsq(rows, target, rcond=None)
        assert np.allclose(rows @ coef, target, atol=1e-9)

    def test_build_basis_validation(self):
        with pytest.raises(ValueError):
            build_basis(degree=3, n_basis=3, radius=1.0)
        with pytest.raises(ValueError):
            build_basis(degree=3, n_basis=10, radius=0.0)
        with pytest.raises(ValueError):
            build_basis(degree=-1, n_basis=10, radius=1.0)


class TestPenaltyDecomposition:
    def test_rank_and_shapes(self, decomp):
        assert decomp.rank == 8
        assert decomp.transform.shape == (10, 10)
        assert decomp.inverse.shape == (10, 10)

    def test_transform_inverse_round_trip(self, decomp):
        assert np.allclose(decomp.transform @ decomp.inverse, np.eye(10), atol=1e-10)

    def test_coefficient_round_trip(self, decomp):
        rng = np.random.default_rng(0)
        coef = rng.normal(size=10)
        theta = decomp.to_independent(coef)
        assert np.allclose(decomp.to_original(theta), coef, atol=1e-10)

    def test_penalty_equals_squared_range_part(self, decomp):
        """c'Sc must equal the squared norm of the penalized block."""
        dmat = difference_matrix(10, 2)
        penalty = dmat.T @ dmat
        rng = np.random.default_rng(1)
        for _ in range(5):
            coef = rng.normal(size=10)
            theta = decomp.to_independent(coef)
            assert np.isclose(coef @ penalty @ coef, np.sum(theta[: decomp.rank] ** 2))

    def test_eigenvalues_descending_positive(self, decomp):
        vals = decomp.eigenvalues[: decomp.rank]
        assert np.all(vals > 0)
        assert np.all(np.diff(vals) <= 1e-12)

    def test_prior_covariance_oracle(self, decomp):
        """Prior covariance equals the scaled pseudo-inverse plus null projector."""
        dmat = difference_matrix(10, 2)
        penalty = dmat.T @ dmat
        tau_range, tau_null, sigma2 = 2.0, 0.5, 3.0
        pinv = np.linalg.pinv(penalty)
        null_proj = np.eye(10) - pinv @ penalty
        direct = sigma2 * (pinv / tau_range + null_proj / tau_null)
        cov = decomp.prior_covariance(tau_range, tau_null, sigma2)
        assert np.allclose(cov, direct, atol=1e-8)

    def test_rejects_rank_deficient_request(self):
        with pytest.raises(ValueError):
            difference_penalty(4, order=4)


class TestExposure:
    def test_empty_distance_set_gives_zeros(self, basis):
        assert np.array_equal(exposure_row(basis, np.array([])), np.zeros(10))

    def test_row_sums_count_distances(self, basis):
        """Partition of unity makes the exposure row sum to the feature count."""
        rng = np.random.default_rng(2)
        d = rng.uniform(0.0, 1.0, size=17)
        assert np.isclose(exposure_row(basis, d).sum(), 17.0)

    def test_single_distance_matches_evaluate(self, basis):
        row = exposure_row(basis, np.array([0.3]))
        assert np.allclose(row, basis.evaluate(np.array([0.3]))[0])

    def test_matrix_stacks_rows(self, basis):
        sets = [np.array([0.1, 0.5]), np.array([]), np.array([0.9])]
        mat = exposure_matrix(basis, sets)
        assert mat.shape == (3, 10)
        assert np.allclose(mat[0], exposure_row(basis, sets[0]))
        assert np.array_equal(mat[1], np.zeros(10))

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), max_size=30))
    @settings(max_examples=25, deadline=None)
    def test_additivity(self, distances):
        """Exposure of a pooled set is the sum of per-feature rows."""
        basis = build_basis(degree=3, n_basis=8, radius=1.0)
        d = np.asarray(distances)
        total = exposure_row(basis, d)
        parts = sum(exposure_row(basis, np.array([x])) for x in distances)
        parts = parts if len(distances) else np.zeros(8)
        assert np.allclose(total, parts, atol=1e-10)


class TestCurveOnGrid:
    def test_constant_curve_from_unit_coefficients(self, basis):
        grid = np.linspace(0.0, 1.0, 50)
        out = curve_on_grid(basis, np.ones(10), grid)
        assert out.shape == (50, 2)
        assert np.array_equal(out[:, 0], grid)
        assert np.allclose(out[:, 1], 1.0)

    def test_decomposed_coefficients_match_original(self, basis, decomp):
        rng = np.random.default_rng(3)
        coef = rng.normal(size=10)
        grid = np.linspace(0.0, 1.0, 40)
        direct = curve_on_grid(basis, coef, grid)
        via_theta = curve_on_grid(basis, decomp.to_independent(coef), grid, decomp)
        assert np.allclose(direct[:, 1], via_theta[:, 1], atol=1e-9)
