from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from synthpanel.panel import PredictorSpec
from synthpanel.scm import estimate_gaps
from synthpanel.simgen import (
    DimensionMismatch,
    FactorDGP,
    FactorModelSpec,
    default_predictors,
    generate_factor_panel,
    heterogeneous_dgp,
    null_battery,
    replication_seed,
    run_battery,
    untreated_outcomes,
)


def manual_spec(loadings, time_effects, factors, t0, effect=0.0, sigma=0.0, **kw):
    loadings = np.asarray(loadings, dtype=float)
    factors = np.asarray(factors, dtype=float)
    n, T = loadings.shape[0], factors.shape[0]
    return FactorModelSpec(
        n_units=n, n_periods=T, t0=t0, n_factors=factors.shape[1],
        time_effects=time_effects, factors=factors, loadings=loadings,
        covariate_coefs=np.zeros((T, 0)), covariates=np.zeros((n, 0)),
        sigma_eps=sigma, effect=np.full(T - t0 + 1, effect), seed=0, **kw)


class TestFactorModel:
    def test_degenerate_common_trend(self):
        spec = manual_spec(np.zeros((3, 0)), np.arange(1.0, 6.0), np.zeros((5, 0)), 3)
        panel, truth = generate_factor_panel(spec)
        np.testing.assert_array_equal(panel.outcomes, np.tile(np.arange(1.0, 6.0), (3, 1)))
        np.testing.assert_array_equal(truth.gap, 0.0)

    def test_noiseless_hull_recovers_weights(self):
        rng = np.random.default_rng(8)
        donors = np.array([[0.1, 0.9], [0.8, 0.2], [0.5, 0.6]])
        loadings = np.vstack([0.5 * donors[0] + 0.5 * donors[1], donors])
        factors = rng.normal(size=(12, 2))
        spec = manual_spec(loadings, 0.1 * np.arange(12), factors, 9, effect=1.0)
        panel, truth = generate_factor_panel(spec)
        sol, gaps = estimate_gaps(panel, spec.treatment_spec(),
                                  PredictorSpec(special_periods=tuple(range(1, 9))))
        np.testing.assert_allclose(sol.w, [0.5, 0.5, 0.0], atol=1e-6)
        np.testing.assert_allclose(gaps.gap[8:], 1.0, atol=1e-6)
        np.testing.assert_allclose(truth.gap[8:], 1.0, atol=1e-12)

    def test_loading_scaling_is_linear(self):
        spec = FactorDGP(seed=2).build()
        zero = untreated_outcomes(replace(spec, loadings=0 * spec.loadings))
        base = untreated_outcomes(spec) - zero
        scaled = untreated_outcomes(replace(spec, loadings=3 * spec.loadings)) - zero
        np.testing.assert_allclose(scaled, 3 * base, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            manual_spec(np.zeros((3, 2)), np.zeros(5), np.zeros((5, 1)), 3)
        with pytest.raises(DimensionMismatch):
            manual_spec(np.zeros((3, 1)), np.zeros(4), np.zeros((5, 1)), 3)
        with pytest.raises(DimensionMismatch):
            manual_spec(np.zeros((3, 1)), np.zeros(5), np.zeros((5, 1)), 1)


class TestFactorDGP:
    def test_same_seed_same_csv(self):
        a, _ = generate_factor_panel(FactorDGP(seed=4, n_covariates=1).build())
        b, _ = generate_factor_panel(FactorDGP(seed=4, n_covariates=1).build())
        c, _ = generate_factor_panel(FactorDGP(seed=5, n_covariates=1).build())
        assert a.to_csv() == b.to_csv() != c.to_csv()

    def test_shapes_and_effect_path(self):
        spec = FactorDGP(seed=1, effect=0.5).build()
        panel, truth = generate_factor_panel(spec)
        assert panel.units[0] == "u00" and panel.n_units == 20 and panel.n_periods == 52
        assert spec.treatment_period == 19
        np.testing.assert_allclose(truth.gap[18:], 0.5)
        np.testing.assert_array_equal(truth.gap[:18], 0.0)

    def test_treated_inside_hull(self):
        for seed in range(10):
            spec = FactorDGP(seed=seed).build()
            hull = spec.loadings[list(spec.hull_donors)]
            A = np.vstack([hull.T, np.ones(3)])
            bary = np.linalg.solve(A, np.append(spec.loadings[0], 1.0))
            assert np.all(bary >= -1e-12)

    def test_concentration_pulls_treated_to_centroid(self):
        def dist(c):
            out = []
            for seed in range(40):
                s = FactorDGP(seed=seed, treated_concentration=c).build()
                out.append(np.linalg.norm(s.loadings[0] - s.loadings[list(s.hull_donors)].mean(axis=0)))
            return np.mean(out)
        assert dist(1000.0) < dist(1.0)

    def test_equal_loadings(self):
        spec = FactorDGP(seed=3, equal_loadings=True).build()
        assert np.all(spec.loadings == spec.loadings[0])

    def test_uniform_noise_scale(self):
        spec = FactorDGP(seed=6, noise="uniform", sigma_eps=0.5, n_periods=400, t0=200).build()
        panel, _ = generate_factor_panel(spec)
        resid = panel.outcomes - untreated_outcomes(spec)
        assert np.std(resid) == pytest.approx(0.5, rel=0.05)
        assert np.abs(resid).max() <= np.sqrt(3) * 0.5

    def test_bad_options(self):
        with pytest.raises(ValueError):
            FactorDGP(loading_scheme="nope").build()
        with pytest.raises(ValueError):
            FactorDGP(factor_process="nope").build()

    def test_heterogeneous_overrides(self):
        dgp = heterogeneous_dgp(seed=7)
        assert (dgp.loading_scheme, dgp.convex_hull, dgp.trend_scale, dgp.seed) == (
            "independent", False, 2.0, 7)

    def test_default_predictors_are_pre(self):
        spec = FactorDGP().build()
        preds = default_predictors(spec)
        assert preds.outcome_mean and preds.special_periods == (1, 7, 12, 18)


class TestBattery:
    def test_replication_seed(self):
        seeds = {replication_seed(0, r) for r in range(100)}
        assert len(seeds) == 100
        assert replication_seed(3, 5) == replication_seed(3, 5) != replication_seed(5, 3)

    def test_null_support_and_determinism(self):
        a = null_battery(FactorDGP(seed=2), 1, in_time_shift=10)
        b = null_battery(FactorDGP(seed=2), 1, in_time_shift=10)
        p = a.p_values[0]
        assert any(abs(p - k / 20) < 1e-12 for k in range(1, 21))
        assert a.replications[0].in_time_p == b.replications[0].in_time_p
        assert a.replications[0].seed == replication_seed(2, 0)
        assert a.p_values.tolist() == b.p_values.tolist()

    def test_null_battery_rejects_effect(self):
        with pytest.raises(ValueError):
            null_battery(FactorDGP(effect=0.5), 1)

    def test_failures_recorded(self):
        res = run_battery(FactorDGP(n_periods=10, t0=4), 2)
        assert len(res.failures) == 2 and res.p_values.size == 0
        assert np.isnan(res.fraction_at_most(0.1))
