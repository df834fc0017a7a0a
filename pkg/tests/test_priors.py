"""PC precision prior, Gaussian priors and hyperparameter transforms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from jointlgm.errors import NonPositivePrecision, NonPositiveTau, UnknownHyperparameter
from jointlgm.priors import (
    HyperPrior,
    PcPrecisionPrior,
    default_prior_spec,
    gaussian_logprior,
    pc_precision_logdensity,
    transform_registry,
)

PC01 = PcPrecisionPrior(u=1.0, alpha=0.01)


class TestPcPrecision:
    def test_value_at_one(self):
        # log[(lambda/2) e^{-lambda}] with lambda = -ln(0.01), evaluated independently
        lam = -np.log(0.01)
        expected = np.log(lam / 2.0) - lam
        assert pc_precision_logdensity(1.0, PC01) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(-3.7711377, abs=1e-6)

    def test_normalizes_to_one(self):
        total, _ = quad(lambda t: np.exp(pc_precision_logdensity(t, PC01)),
                        1e-12, np.inf, limit=400)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_tail_condition_exact(self):
        # P(sd > u) = alpha  <=>  integral of the density over (0, 1/u^2)
        mass, _ = quad(lambda t: np.exp(pc_precision_logdensity(t, PC01)),
                       1e-14, 1.0, limit=400)
        assert mass == pytest.approx(0.01, abs=1e-6)
        assert np.exp(-PC01.lambda_ * PC01.u) == pytest.approx(0.01, abs=1e-12)

    def test_mode(self):
        tau_star = PC01.mode()
        grid = np.linspace(0.5 * tau_star, 2.0 * tau_star, 4001)
        vals = pc_precision_logdensity(grid, PC01)
        assert abs(grid[np.argmax(vals)] - tau_star) < 0.01 * tau_star

    def test_nonpositive_tau(self):
        with pytest.raises(NonPositiveTau):
            pc_precision_logdensity(0.0, PC01)


class TestGaussianPrior:
    def test_standard_value(self):
        assert gaussian_logprior(0.0, 0.0, 1.0) == pytest.approx(-0.918939, abs=1e-6)

    def test_mode_at_mean(self):
        grid = np.linspace(-3, 3, 301)
        vals = gaussian_logprior(grid, 0.7, 2.0)
        assert grid[np.argmax(vals)] == pytest.approx(0.7, abs=0.02)

    def test_vague_prior_matches_direct_formula(self):
        x, mean, prec = 2.0, 0.0, 0.001
        direct = 0.5 * np.log(prec / (2 * np.pi)) - 0.5 * prec * (x - mean) ** 2
        assert gaussian_logprior(x, mean, prec) == pytest.approx(direct, abs=1e-12)

    def test_nonpositive_precision(self):
        with pytest.raises(NonPositivePrecision):
            gaussian_logprior(0.0, 0.0, 0.0)


class TestTransforms:
    def test_rho_fixed_point(self):
        [tr] = transform_registry(["rho"])
        assert tr.forward(0.0) == pytest.approx(0.0, abs=1e-15)
        assert tr.backward(0.0) == pytest.approx(0.0, abs=1e-15)

    def test_log_transform_value(self):
        [tr] = transform_registry(["tau_eps"])
        assert tr.forward(np.exp(3.0)) == pytest.approx(3.0, abs=1e-12)

    @given(st.sampled_from(["tau_eps", "kappa", "tau_alpha", "tau_w", "tau_v", "tau_m"]),
           st.floats(-8.0, 8.0))
    @settings(max_examples=60, deadline=None)
    def test_log_round_trip(self, name, z):
        [tr] = transform_registry([name])
        assert tr.forward(tr.backward(z)) == pytest.approx(z, abs=1e-12)

    @given(st.floats(-0.999, 0.999))
    @settings(max_examples=60, deadline=None)
    def test_rho_round_trip(self, rho):
        [tr] = transform_registry(["rho"])
        assert tr.backward(tr.forward(rho)) == pytest.approx(rho, abs=1e-12)

    def test_thousand_random_round_trips(self):
        rng = np.random.default_rng(0)
        tau = np.exp(rng.uniform(-6, 6, 1000))
        [tr] = transform_registry(["tau_w"])
        err = np.abs(np.array([tr.backward(tr.forward(t)) for t in tau]) - tau) / tau
        assert err.max() < 1e-12

    def test_unknown_hyperparameter(self):
        with pytest.raises(UnknownHyperparameter):
            transform_registry(["zeta"])


class TestHyperPrior:
    def test_mass_preserved_under_change_of_variables(self):
        pr = HyperPrior("tau_alpha", {"type": "pc_precision", "u": 1.0, "alpha": 0.01})
        lo, hi = 0.5, 4.0
        on_user, _ = quad(lambda t: np.exp(pr.log_density_user(t)), lo, hi)
        on_z, _ = quad(lambda z: np.exp(pr.log_density_unconstrained(z)),
                       np.log(lo), np.log(hi))
        assert on_user == pytest.approx(on_z, abs=1e-6)

    def test_gaussian_prior_mass_preserved(self):
        pr = HyperPrior("rho", {"type": "gaussian", "mean": 0.0, "precision": 0.15})
        on_user, _ = quad(lambda r: np.exp(pr.log_density_user(r)), -0.6, 0.6)
        fz = transform_registry(["rho"])[0].forward
        on_z, _ = quad(lambda z: np.exp(pr.log_density_unconstrained(z)),
                       fz(-0.6), fz(0.6))
        assert on_user == pytest.approx(on_z, abs=1e-6)

    def test_default_specs_cover_all_names(self):
        for nm in ("tau_eps", "kappa", "tau_alpha", "tau_w", "tau_v", "rho",
                   "nu", "nu1", "nu2", "tau_m"):
            HyperPrior(nm, default_prior_spec(nm))

    def test_pc_start_is_prior_mode(self):
        pr = HyperPrior("tau_w", {"type": "pc_precision", "u": 1.0, "alpha": 0.01})
        assert pr.start_value() == pytest.approx(PC01.mode())
