"""Data stacking, association weights, mapping matrix and joint density."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointlgm.errors import (
    DuplicateSurvivalRow,
    InvalidRho,
    OrphanSurvivalRow,
    TimeOutsideKnotRange,
    WrongNuArity,
)
from jointlgm.model import (
    LINK_PRECISION,
    AssociationStructure,
    JointData,
    LongRow,
    ModelConfig,
    SplineConfig,
    SurvRow,
    association_weights,
    build_mapping,
    joint_logdensity_parts,
    stack,
)
from jointlgm.simulate import SimScenario, simulate_joint


def small_data():
    return JointData(
        long_rows=[
            LongRow(subject_id="a", t=0.0, y=1.0, x=(0.3,)),
            LongRow(subject_id="a", t=1.0, y=1.5, x=(0.3,)),
            LongRow(subject_id="b", t=0.5, y=-0.2, x=(-1.0,)),
        ],
        surv_rows=[
            SurvRow(subject_id="a", s=2.0, c=1, z=(0.7,)),
            SurvRow(subject_id="b", s=1.5, c=0, z=(0.1,)),
        ],
    )


class TestJointData:
    def test_duplicate_survival_row(self):
        with pytest.raises(DuplicateSurvivalRow):
            JointData(long_rows=[], surv_rows=[
                SurvRow("a", 1.0, 1), SurvRow("a", 2.0, 0)])

    def test_orphan_longitudinal_subject(self):
        with pytest.raises(OrphanSurvivalRow):
            JointData(long_rows=[LongRow("ghost", 0.0, 1.0)],
                      surv_rows=[SurvRow("a", 1.0, 1)])

    def test_longitudinal_only_dataset_allowed(self):
        d = JointData(long_rows=[LongRow("a", 0.0, 1.0)], surv_rows=[])
        assert len(d.long_rows) == 1


class TestStack:
    def test_fixed_effect_columns_zero_padded(self):
        design = stack(small_data(), ModelConfig(spline=None))
        [x_col] = design.stacked_x_columns
        assert x_col == [0.3, 0.3, -1.0, 0.0, 0.0]
        [z_col] = design.stacked_z_columns
        assert z_col == [0.0, 0.0, 0.0, 0.7, 0.1]

    def test_no_survival_covariates_no_padding(self):
        data = JointData(
            long_rows=[LongRow("a", 0.0, 1.0)],
            surv_rows=[SurvRow("a", 1.0, 1)])
        design = stack(data, ModelConfig(spline=None))
        assert design.stacked_z_columns == []

    def test_response_and_spline_index_lengths(self):
        rows_l = [LongRow(i, t, float(i + t)) for i in range(3) for t in (0.0, 1.0)]
        rows_s = [SurvRow(i, 2.0, 1) for i in range(3)]
        design = stack(JointData(rows_l, rows_s),
                       ModelConfig(spline=SplineConfig(n_knots=3)))
        assert len(design.response) == 6 + 3
        spline_idx = design.spline_index
        assert sum(v is not None for v in spline_idx) == 6
        assert all(v is None for v in spline_idx[6:])

    def test_response_carries_y_and_s_c(self):
        design = stack(small_data(), ModelConfig(spline=None))
        assert design.response[:3] == [1.0, 1.5, -0.2]
        assert design.response[3:] == [(2.0, 1), (1.5, 0)]

    def test_unstack_is_lossless(self):
        data = small_data()
        assert stack(data, ModelConfig(spline=None)).unstack() == data


class TestAssociationWeights:
    def test_shared_scaling(self):
        assert association_weights(AssociationStructure("eq6"), 2.0, 3.0) == (2.0, 6.0)

    def test_intercept_only(self):
        assert association_weights(AssociationStructure("eq4"), 1.5, 7.0) == (1.5, 0.0)

    def test_slope_only(self):
        assert association_weights(AssociationStructure("eq5"), 2.0, 3.0) == (0.0, 6.0)

    def test_separate_weights(self):
        assert association_weights(AssociationStructure("eq7"), (1.0, 0.5), 4.0) == (1.0, 2.0)

    def test_wrong_arity(self):
        with pytest.raises(WrongNuArity):
            association_weights(AssociationStructure("eq6"), (1.0, 2.0), 1.0)
        with pytest.raises(WrongNuArity):
            association_weights(AssociationStructure("eq7"), (1.0,), 1.0)


class TestMapping:
    def config(self, kind="eq6"):
        return ModelConfig(association=AssociationStructure(kind),
                           spline=SplineConfig(n_knots=4))

    def test_zero_nu_decouples_survival_from_shared_effects(self):
        design = stack(small_data(), self.config())
        theta = design.hyper_from_values(dict(
            tau_eps=1.0, kappa=1.0, tau_alpha=1.0, tau_w=1.0, tau_v=1.0, rho=0.0, nu=0.0))
        a = build_mapping(design, theta).toarray()
        w_sl = design.layout.slice("w")
        v_sl = design.layout.slice("v")
        surv_rows = a[design.n_long:]
        assert np.all(surv_rows[:, w_sl] == 0.0)
        assert np.all(surv_rows[:, v_sl] == 0.0)

    def test_time_at_knot_gets_unit_weight(self):
        design = stack(small_data(), self.config())
        theta = design.hyper_from_values(dict(
            tau_eps=1.0, kappa=1.0, tau_alpha=1.0, tau_w=1.0, tau_v=1.0, rho=0.0, nu=0.5))
        a = build_mapping(design, theta).toarray()
        al = design.layout.slice("alpha")
        # first longitudinal row is at t=0, the first knot
        assert a[0, al][0] == pytest.approx(1.0)
        assert np.sum(a[0, al] != 0.0) <= 2

    def test_interpolation_weights_nonnegative_sum_to_one(self):
        design = stack(small_data(), self.config())
        theta = design.hyper_from_values(dict(
            tau_eps=1.0, kappa=1.0, tau_alpha=1.0, tau_w=1.0, tau_v=1.0, rho=0.0, nu=0.5))
        a = build_mapping(design, theta).toarray()
        al = design.layout.slice("alpha")
        weights = a[:design.n_long, al]
        assert np.all(weights >= 0.0)
        assert np.allclose(weights.sum(axis=1), 1.0)

    @given(st.integers(0, 100), st.sampled_from(["eq4", "eq5", "eq6", "eq7"]))
    @settings(max_examples=20, deadline=None)
    def test_mapping_reproduces_per_row_assembly(self, seed, kind):
        rng = np.random.default_rng(seed)
        struct = AssociationStructure(kind)
        nu = tuple(rng.normal(size=struct.n_params))
        data = small_data()
        design = stack(data, ModelConfig(association=struct,
                                         spline=SplineConfig(n_knots=4), frailty=True))
        vals = dict(tau_eps=1.0, kappa=1.0, tau_alpha=2.0, tau_w=1.0, tau_v=1.0,
                    rho=0.1, tau_m=3.0)
        for nm, v in zip(struct.param_names, nu):
            vals[nm] = v
        theta = design.hyper_from_values(vals)
        a = build_mapping(design, theta)
        x = rng.standard_normal(design.layout.rest_dim)
        eta = np.asarray(a @ x)

        # independent per-row assembly
        lay = design.layout
        knots = design.knots
        alpha = x[lay.slice("alpha")]
        beta = x[lay.slice("beta")]
        gamma = x[lay.slice("gamma")]
        w = x[lay.slice("w")]
        v = x[lay.slice("v")]
        m = x[lay.slice("m")]
        for i, row in enumerate(data.long_rows):
            si = design.subjects.index(row.subject_id)
            expected = (np.interp(row.t, knots, alpha) + np.dot(row.x, beta)
                        + w[si] + v[si] * row.t)
            assert eta[i] == pytest.approx(expected, abs=1e-12)
        for l, row in enumerate(data.surv_rows):
            ww, wv = association_weights(struct, nu, row.s)
            expected = np.dot(row.z, gamma) + ww * w[l] + wv * v[l] + m[l]
            assert eta[design.n_long + l] == pytest.approx(expected, abs=1e-12)

    def test_time_outside_knot_range(self):
        data = small_data()
        cfg = ModelConfig(spline=SplineConfig(knots=(0.2, 0.5, 0.8)))
        with pytest.raises(TimeOutsideKnotRange):
            stack(data, cfg)


class TestJointLogDensity:
    def test_conjugate_bivariate_closed_form(self):
        # x = (w, eta) jointly Gaussian; y = 2 observed at eta with tau_eps = 1
        data = JointData(long_rows=[LongRow("a", 0.0, 2.0)],
                         surv_rows=[SurvRow("a", 1.0, 0)])
        config = ModelConfig(association=AssociationStructure("eq4"),
                             baseline_hazard="exponential", spline=None,
                             fixed=dict(tau_eps=1.0, tau_w=1.0, tau_v=1.0,
                                        rho=0.0, nu=0.0))
        design = stack(data, config)
        theta = design.hyper_from_z(np.zeros(0))
        x = np.array([0.4, -0.1, 0.6, 0.05])  # (w, v, eta_L, eta_S)
        lp_x, lp_y, lp_t = joint_logdensity_parts(x, theta, design)

        # independent dense evaluation of the same augmented Gaussian,
        # assembled in precision form to keep the link terms exact
        from scipy.stats import norm
        q = np.diag([1.0, 1.0])  # w, v prior
        a = np.array([[1.0, 0.0], [0.0, 0.0]])  # eta_L = w; eta_S = 0 (nu=0)
        k_link = LINK_PRECISION * np.eye(2)
        q_aug = np.block([
            [q + a.T @ k_link @ a, -a.T @ k_link],
            [-k_link @ a, k_link]])
        sign, logdet = np.linalg.slogdet(q_aug)
        assert sign > 0
        expected_x = 0.5 * (logdet - 4 * np.log(2 * np.pi)) - 0.5 * x @ q_aug @ x
        assert lp_x == pytest.approx(expected_x, rel=1e-12)
        expected_y = norm.logpdf(2.0, loc=0.6, scale=1.0) + (-1.0 * np.exp(0.05))
        assert lp_y == pytest.approx(expected_y, rel=1e-12)
        assert lp_t == 0.0  # everything fixed: no free hyperparameters

    def test_invalid_rho_raises(self):
        design = stack(small_data(), ModelConfig(spline=SplineConfig(n_knots=4)))
        with pytest.raises(InvalidRho):
            design.hyper_from_values(dict(tau_eps=1.0, kappa=1.0, tau_alpha=1.0,
                                          tau_w=1.0, tau_v=1.0, rho=1.0, nu=0.1))

    def test_finite_on_simulated_data_at_truth(self):
        scen = SimScenario(n_subjects=20, obs_times=(0.0, 1.0, 2.0, 3.0, 4.0),
                           sigma_w=0.5, seed=3)
        data, truth = simulate_joint(scen)
        design = stack(data, ModelConfig(association=AssociationStructure("eq4"),
                                         baseline_hazard="exponential",
                                         spline=SplineConfig(n_knots=6)))
        theta = design.hyper_from_values(dict(
            tau_eps=10.0, tau_alpha=1.0, tau_w=4.0, tau_v=4.0, rho=0.0, nu=1.0))
        x = np.zeros(design.layout.dim)
        parts = joint_logdensity_parts(x, theta, design)
        assert all(np.isfinite(p) for p in parts)


class TestLayoutAndHyperNames:
    def test_every_block_present_in_full_model(self):
        data = small_data()
        design = stack(data, ModelConfig(spline=SplineConfig(n_knots=4), frailty=True))
        assert design.layout.names == ("alpha", "beta", "gamma", "w", "v", "m",
                                       "eta_L", "eta_S")
        assert design.layout.dim == 4 + 1 + 1 + 2 + 2 + 2 + 3 + 2

    def test_hyper_names_full_model(self):
        design = stack(small_data(), ModelConfig(spline=SplineConfig(n_knots=4),
                                                 frailty=True))
        assert design.free_names == ("tau_eps", "kappa", "tau_alpha", "tau_w",
                                     "tau_v", "rho", "nu", "tau_m")

    def test_eq7_has_two_association_parameters(self):
        design = stack(small_data(), ModelConfig(
            association=AssociationStructure("eq7"), spline=SplineConfig(n_knots=4)))
        assert "nu1" in design.free_names and "nu2" in design.free_names

    def test_exponential_fixes_kappa(self):
        design = stack(small_data(), ModelConfig(baseline_hazard="exponential",
                                                 spline=SplineConfig(n_knots=4)))
        assert "kappa" not in design.free_names
        assert design.fixed["kappa"] == 1.0

    def test_z_round_trip(self):
        design = stack(small_data(), ModelConfig(spline=SplineConfig(n_knots=4)))
        z = np.array([0.3, -0.2, 1.0, 0.5, -0.5, 0.2, 0.7])
        theta = design.hyper_from_z(z)
        assert np.allclose(design.z_from_hyper(theta), z, atol=1e-12)
