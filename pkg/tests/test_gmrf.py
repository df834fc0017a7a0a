"""Matrix kernel tests: factorization, RW2 builders, intercept-slope blocks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointlgm.errors import InvalidRho, NonIncreasingKnots, NotPositiveDefinite, TooFewKnots
from jointlgm.gmrf import (
    IntSlopeSpec,
    Rw2Spec,
    SparseSymMatrix,
    cholesky,
    constrained_marginal_variances,
    intslope_precision,
    rw2_precision,
    rw2_structure,
    scale_rw2,
)


def spd_matrix(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


class TestCholesky:
    def test_identity_logdet_zero(self):
        m = SparseSymMatrix.from_dense(np.eye(3))
        assert cholesky(m).logdet() == pytest.approx(0.0, abs=1e-14)

    def test_diagonal_logdet(self):
        m = SparseSymMatrix.from_dense(np.diag([2.0, 2.0]))
        assert cholesky(m).logdet() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_logdet_matches_dense_lu_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 5))
        m = a @ a.T + np.eye(5)
        sign, oracle = np.linalg.slogdet(m)  # LU-based
        assert sign > 0
        assert cholesky(SparseSymMatrix.from_dense(m)).logdet() == pytest.approx(oracle, abs=1e-9)

    @given(st.integers(0, 1000), st.integers(2, 12))
    @settings(max_examples=40, deadline=None)
    def test_solve_is_inverse_on_range(self, seed, n):
        rng = np.random.default_rng(seed)
        m = spd_matrix(rng, n)
        fac = cholesky(SparseSymMatrix.from_dense(m))
        x = rng.standard_normal(n)
        assert np.allclose(fac.solve(m @ x), x, rtol=1e-10, atol=1e-10)

    def test_marginal_variances_match_dense_inverse(self):
        rng = np.random.default_rng(3)
        m = spd_matrix(rng, 8)
        fac = cholesky(SparseSymMatrix.from_dense(m))
        assert np.allclose(fac.marginal_variances(), np.diag(np.linalg.inv(m)), rtol=1e-10)

    def test_rank_deficient_raises(self):
        s = rw2_structure(np.arange(5.0))  # rank 3 of 5
        with pytest.raises(NotPositiveDefinite):
            cholesky(s)

    def test_nonsymmetric_rejected(self):
        with pytest.raises(ValueError):
            SparseSymMatrix.from_dense(np.array([[1.0, 2.0], [0.5, 3.0]]))


class TestRw2:
    def test_unit_spacing_matches_second_difference_penalty(self):
        q = rw2_precision(Rw2Spec(knots=np.arange(4.0), scaled=False, tau_alpha=1.0))
        expected = np.array([
            [1.0, -2.0, 1.0, 0.0],
            [-2.0, 5.0, -4.0, 1.0],
            [1.0, -4.0, 5.0, -2.0],
            [0.0, 1.0, -2.0, 1.0],
        ])
        assert np.allclose(q.to_dense(), expected, atol=1e-12)

    @given(st.integers(0, 500), st.integers(3, 20), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_annihilates_constant_and_linear(self, seed, n, scaled):
        rng = np.random.default_rng(seed)
        knots = np.cumsum(0.1 + rng.random(n))
        q = rw2_precision(Rw2Spec(knots=knots, scaled=scaled, tau_alpha=2.5)).to_dense()
        assert np.max(np.abs(q @ np.ones(n))) < 1e-12 * max(1.0, np.abs(q).max())
        assert np.max(np.abs(q @ knots)) < 1e-10 * max(1.0, np.abs(q).max()) * max(1.0, np.abs(knots).max())

    def test_rank_is_n_minus_2_by_eigen_oracle(self):
        q = rw2_precision(Rw2Spec(knots=np.arange(4.0), scaled=False)).to_dense()
        eigs = np.linalg.eigvalsh(q)
        assert np.sum(eigs > 1e-10 * eigs.max()) == 2

    def test_too_few_knots(self):
        with pytest.raises(TooFewKnots):
            Rw2Spec(knots=[0.0, 1.0])

    def test_non_increasing_knots(self):
        with pytest.raises(NonIncreasingKnots):
            Rw2Spec(knots=[0.0, 1.0, 1.0, 2.0])


class TestScaleRw2:
    def test_geometric_mean_of_constrained_variances_is_one(self):
        # oracle: eigen pseudo-inverse with the two null directions removed
        s = scale_rw2(rw2_structure(np.arange(10.0)))
        dense = s.to_dense()
        eigval, eigvec = np.linalg.eigh(dense)
        keep = eigval > 1e-9 * eigval.max()
        pinv = (eigvec[:, keep] / eigval[keep]) @ eigvec[:, keep].T
        gm = np.exp(np.mean(np.log(np.diag(pinv))))
        assert gm == pytest.approx(1.0, abs=1e-8)

    def test_idempotent(self):
        s = scale_rw2(rw2_structure(np.arange(8.0)))
        again = scale_rw2(s)
        assert np.allclose(again.to_dense(), s.to_dense(), rtol=1e-10)

    def test_scaling_factor_one_for_scaled_input(self):
        s = scale_rw2(rw2_structure(np.arange(8.0)))
        v = constrained_marginal_variances(s)
        assert np.exp(np.mean(np.log(v))) == pytest.approx(1.0, abs=1e-10)

    def test_sample_path_sd_stable_across_knot_counts(self):
        # Monte Carlo under the null-space constraints: prior sd at comparable
        # interior time points should agree within 15% between 10 and 20 knots
        # (the free boundary makes the outermost knots resolution-sensitive)
        rng = np.random.default_rng(11)
        sds = {}
        for n in (10, 20):
            knots = np.linspace(0.0, 9.0, n)
            q = scale_rw2(rw2_structure(knots), knots=knots).to_dense()
            eigval, eigvec = np.linalg.eigh(q)
            keep = eigval > 1e-9 * eigval.max()
            half = eigvec[:, keep] / np.sqrt(eigval[keep])
            draws = half @ rng.standard_normal((keep.sum(), 20000))
            emp_sd = draws.std(axis=1)
            sds[n] = np.interp(np.linspace(2.0, 7.0, 6), knots, emp_sd)
        assert np.all(np.abs(sds[10] / sds[20] - 1.0) < 0.15)


class TestIntSlope:
    def test_uncorrelated_unit_case_is_identity(self):
        q = intslope_precision(IntSlopeSpec(sigma_w=1.0, sigma_v=1.0, rho=0.0))
        assert np.allclose(q.to_dense(), np.eye(2), atol=1e-14)

    def test_half_correlation_closed_form(self):
        q = intslope_precision(IntSlopeSpec(sigma_w=1.0, sigma_v=1.0, rho=0.5))
        expected = np.array([[4.0 / 3.0, -2.0 / 3.0], [-2.0 / 3.0, 4.0 / 3.0]])
        assert np.allclose(q.to_dense(), expected, atol=1e-12)

    @given(st.floats(0.1, 5.0), st.floats(0.1, 5.0), st.floats(-0.95, 0.95))
    @settings(max_examples=50, deadline=None)
    def test_product_with_covariance_is_identity(self, sw, sv, rho):
        spec = IntSlopeSpec(sigma_w=sw, sigma_v=sv, rho=rho)
        q = intslope_precision(spec).to_dense()
        assert np.allclose(q @ spec.covariance(), np.eye(2), atol=1e-12)

    def test_round_trip_recovers_parameters(self):
        spec = IntSlopeSpec(sigma_w=0.7, sigma_v=2.1, rho=-0.4)
        cov = np.linalg.inv(intslope_precision(spec).to_dense())
        assert np.sqrt(cov[0, 0]) == pytest.approx(0.7, abs=1e-12)
        assert np.sqrt(cov[1, 1]) == pytest.approx(2.1, abs=1e-12)
        assert cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1]) == pytest.approx(-0.4, abs=1e-12)

    def test_replication_is_block_diagonal(self):
        spec = IntSlopeSpec(sigma_w=1.0, sigma_v=1.0, rho=0.3)
        q1 = intslope_precision(spec).to_dense()
        q3 = intslope_precision(spec, n_subjects=3).to_dense()
        for i in range(3):
            assert np.allclose(q3[2 * i:2 * i + 2, 2 * i:2 * i + 2], q1)
        q3[np.kron(np.eye(3, dtype=bool), np.ones((2, 2), dtype=bool))] = 0.0
        assert np.all(q3 == 0.0)

    def test_invalid_rho(self):
        with pytest.raises(InvalidRho):
            IntSlopeSpec(sigma_w=1.0, sigma_v=1.0, rho=1.0)
