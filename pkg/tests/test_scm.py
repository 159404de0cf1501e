from __future__ import annotations

import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import make_panel
from oracles import grid_simplex_min, qp_objective
from synthpanel import _kernels
from synthpanel.panel import PredictorSpec, TreatmentSpec, build_design
from synthpanel.scm import (
    DegenerateProblem,
    GapSeries,
    NonFiniteInput,
    TrainValSplit,
    estimate_gaps,
    solve_v,
    solve_w,
    synthesize,
)
from synthpanel.simgen import FactorDGP, default_predictors, generate_factor_panel


def kkt_residual(X1, X0, v, w) -> float:
    """Max violation of the simplex KKT conditions for the weighted LS objective."""
    g = -2 * X0.T @ (v * (X1 - X0 @ w))
    lam = g[w > 1e-9].min() if np.any(w > 1e-9) else g.min()
    return float(max(lam - g.min(), np.max(np.abs(g[w > 1e-9] - lam), initial=0.0)))


class TestSolveW:
    def test_single_donor(self):
        w, obj = solve_w([3.0, -1.0], [[0.0], [5.0]], [0.5, 0.5])
        np.testing.assert_array_equal(w, [1.0])
        assert obj == pytest.approx(0.5 * 9 + 0.5 * 36)

    def test_vertex_interpolation(self, rng):
        X0 = rng.normal(size=(3, 5))
        w, obj = solve_w(X0[:, 1], X0, [0.2, 0.3, 0.5])
        assert w[1] >= 1 - 1e-6
        assert obj <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_grid_oracle_k2_j3(self, seed):
        r = np.random.default_rng(seed)
        X0, X1, v = r.uniform(size=(2, 3)), r.uniform(size=2), r.dirichlet([1, 1])
        oracle, _ = grid_simplex_min(X1, X0, v)
        w, obj = solve_w(X1, X0, v)
        assert obj <= oracle + 1e-12
        assert oracle - obj <= 1e-6
        assert obj == pytest.approx(qp_objective(X1, X0, v, w), abs=1e-14)

    def test_simplex_and_kkt_on_random_instances(self, rng):
        for _ in range(300):
            K, J = rng.integers(1, 8), rng.integers(2, 30)
            X0 = rng.normal(size=(K, J))
            X1 = rng.normal(size=K)
            v = rng.dirichlet(np.ones(K))
            w, obj = solve_w(X1, X0, v)
            assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-8
            scale = max(1.0, np.abs(X0).max() ** 2)
            assert kkt_residual(X1, X0, v, w) <= 1e-8 * scale

    def test_degenerate_inputs(self, rng):
        # duplicated donors, zero-objective interior optimum, collinear predictors
        X0 = rng.normal(size=(2, 3))
        X0 = np.column_stack([X0, X0])
        X1 = X0[:, :3] @ np.array([0.2, 0.3, 0.5])
        w, obj = solve_w(X1, X0, [1.0, 1.0])
        assert obj <= 1e-20 and abs(w.sum() - 1) <= 1e-12
        X0 = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
        w, obj = solve_w([2.0, 4.0], X0, [0.5, 0.5])
        assert obj <= 1e-20

    def test_all_zero_v_uniform_with_warning(self):
        with pytest.warns(DegenerateProblem):
            w, obj = solve_w([1.0, 2.0], np.eye(2), [0.0, 0.0])
        np.testing.assert_array_equal(w, [0.5, 0.5])

    def test_errors(self):
        with pytest.raises(NonFiniteInput):
            solve_w([np.nan], [[1.0, 2.0]], [1.0])
        with pytest.raises(ValueError):
            solve_w([1.0], [[1.0, 2.0]], [-1.0])
        with pytest.raises(ValueError):
            solve_w([1.0, 2.0], [[1.0, 2.0]], [1.0])

    def test_deterministic(self, rng):
        X0, X1, v = rng.normal(size=(4, 12)), rng.normal(size=4), rng.dirichlet(np.ones(4))
        a, b = solve_w(X1, X0, v), solve_w(X1, X0, v)
        assert a[0].tobytes() == b[0].tobytes() and a[1] == b[1]

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
        arrays(np.float64, 3, elements=st.floats(-10, 10)),
        arrays(np.float64, 3, elements=st.floats(0.01, 1)),
        arrays(np.float64, (20, 4), elements=st.floats(0, 1)),
    )
    def test_never_above_sampled_simplex_points(self, X0, X1, v, samples):
        w, obj = solve_w(X1, X0, v)
        tot = samples.sum(axis=1, keepdims=True)
        pts = np.where(tot > 1e-9, samples / np.where(tot > 1e-9, tot, 1.0), 0.25)
        for p in pts:
            assert obj <= qp_objective(X1, X0, v, p) + 1e-9 * (1 + obj)


class TestKernels:
    def test_min_norm_point_origin_inside_hull(self):
        Q = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        w, obj, _, conv = _kernels.min_norm_point(Q)
        assert conv and obj <= 1e-24 and abs(w.sum() - 1) < 1e-15

    def test_nelder_mead_finds_lattice_quality_minimum(self):
        spec = FactorDGP(seed=9).build()
        panel, _ = generate_factor_panel(spec)
        design = build_design(panel, spec.treatment_spec(), PredictorSpec(special_periods=(5,)))
        sol = solve_v(design)
        assert sol.diagnostics.restarts == 8  # uniform, informed, 5 random, lattice
        assert sol.diagnostics.n_evaluations > 0


class TestTrainValSplit:
    def test_default_halving(self):
        train, val = TrainValSplit().masks(7)
        assert train.tolist() == [True] * 4 + [False] * 3
        assert (~val).tolist() == train.tolist()

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainValSplit(n_train=5).masks(5)
        with pytest.raises(ValueError):
            TrainValSplit().masks(1)


def perfect_twin_panel(twin: int = 3, J: int = 6, T: int = 20, t0: int = 15, seed: int = 0):
    rng = np.random.default_rng(seed)
    y = np.cumsum(rng.normal(size=(J + 1, T)), axis=1)
    y[0, : t0 - 1] = y[twin, : t0 - 1]
    y[0, t0 - 1:] = y[twin, t0 - 1:] + 1.0
    panel = make_panel(y)
    return panel, TreatmentSpec.all_others(panel, "u0", t0)


class TestSolveV:
    def test_k1_forced(self):
        spec_ = FactorDGP(seed=1).build()
        panel, _ = generate_factor_panel(spec_)
        design = build_design(panel, spec_.treatment_spec())
        sol = solve_v(design)
        np.testing.assert_array_equal(sol.v, [1.0])
        w, obj = solve_w(design.X1, design.X0, [1.0])
        np.testing.assert_array_equal(sol.w, w)
        assert sol.inner_objective == obj

    def test_perfect_twin(self):
        panel, spec = perfect_twin_panel()
        design = build_design(panel, spec, PredictorSpec(special_periods=(2, 6, 10, 14)))
        sol = solve_v(design)
        assert sol.validation_mspe <= 1e-12
        assert sol.weights_by_donor()["u3"] >= 1 - 1e-6

    def test_validation_mspe_beats_v_grid(self):
        spec_ = FactorDGP(seed=21, n_donors=8).build()
        panel, _ = generate_factor_panel(spec_)
        design = build_design(panel, spec_.treatment_spec(), PredictorSpec(special_periods=(4,)))
        sol = solve_v(design)
        assert design.n_predictors == 2
        train, val = TrainValSplit().masks(len(design.pre_periods))
        X1t, X0t = design.predictors_on(train)
        best = math.inf
        for a in np.linspace(0, 1, 101):
            w, _ = solve_w(X1t, X0t, [a, 1 - a])
            r = design.Y1_pre[val] - design.Y0_pre[val] @ w
            best = min(best, math.fsum(r * r) / r.size)
        assert sol.validation_mspe <= best + 1e-9

    def test_weights_on_simplex_and_deterministic(self):
        spec_ = FactorDGP(seed=8, n_covariates=2).build()
        panel, _ = generate_factor_panel(spec_)
        design = build_design(panel, spec_.treatment_spec(), PredictorSpec(special_periods=(1, 9)))
        a, b = solve_v(design, seed=4), solve_v(design, seed=4)
        for s in (a, b):
            assert np.all(s.w >= 0) and abs(s.w.sum() - 1) <= 1e-8
            assert np.all(s.v >= 0) and abs(s.v.sum() - 1) <= 1e-8
        assert a.w.tobytes() == b.w.tobytes() and a.v.tobytes() == b.v.tobytes()

    def test_non_unique_flag(self, rng):
        y = np.cumsum(rng.normal(size=(5, 12)), axis=1)
        y = np.vstack([y, y[1]])  # u5 duplicates u1
        y[0] = 0.5 * y[1] + 0.5 * y[2]
        panel = make_panel(y)
        design = build_design(panel, TreatmentSpec.all_others(panel, "u0", 10),
                              PredictorSpec(special_periods=(2, 5, 8)))
        assert solve_v(design).diagnostics.non_unique_weights
        unique = build_design(panel, TreatmentSpec("u0", 10, ("u1", "u2", "u3"), (1, 12)),
                              PredictorSpec(special_periods=(2, 5, 8)))
        assert not solve_v(unique).diagnostics.non_unique_weights


class TestSynthesize:
    panel = make_panel([[0, 0, 0], [1, 2, 3], [3, 2, 1], [5, 5, 5]])
    spec = TreatmentSpec("u0", 3, ("u1", "u2", "u3"), (1, 3))

    def test_one_hot(self):
        np.testing.assert_array_equal(synthesize(self.panel, self.spec, [0, 1, 0]), [3, 2, 1])

    def test_uniform_two(self):
        spec = TreatmentSpec("u0", 3, ("u1", "u2"), (1, 3))
        np.testing.assert_array_equal(synthesize(self.panel, spec, [0.5, 0.5]), [2, 2, 2])

    def test_random_against_fsum(self, rng):
        y = rng.normal(size=(6, 9))
        panel = make_panel(y)
        spec = TreatmentSpec.all_others(panel, "u0", 6)
        w = rng.dirichlet(np.ones(5))
        got = synthesize(panel, spec, w)
        for t in range(9):
            assert abs(got[t] - math.fsum(w[j] * y[j + 1, t] for j in range(5))) <= 1e-12

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            synthesize(self.panel, self.spec, [1.0])


class TestGapSeries:
    def test_rmse_and_effects(self):
        g = GapSeries((1, 2, 3, 4), np.array([1.0, 1, 3, 4]), np.array([1.1, 0.9, 2, 2]), 3)
        np.testing.assert_allclose(g.gap, [-0.1, 0.1, 1, 2])
        assert g.pre_rmse == pytest.approx(0.1)
        assert g.post_rmse == pytest.approx(math.sqrt(2.5))
        assert g.effect_avg_post == pytest.approx(1.5)
        assert g.effect_end_of_sample == 2.0
        assert not g.perfect_prefit


class TestEstimateGaps:
    def test_exact_convex_combination_null(self, rng):
        y = np.cumsum(rng.normal(size=(5, 16)), axis=1)
        y[0] = 0.3 * y[1] + 0.7 * y[2]
        panel = make_panel(y)
        spec = TreatmentSpec.all_others(panel, "u0", 11)
        preds = PredictorSpec(special_periods=tuple(range(1, 11)))
        sol, gaps = estimate_gaps(panel, spec, preds)
        assert np.max(np.abs(gaps.gap)) <= 1e-6
        np.testing.assert_allclose(sol.w, [0.3, 0.7, 0, 0], atol=1e-6)

    def test_perfect_twin_rmse(self):
        panel, spec = perfect_twin_panel()
        sol, gaps = estimate_gaps(panel, spec, PredictorSpec(special_periods=(3, 8, 13)))
        assert gaps.pre_rmse <= 1e-6
        assert gaps.effect_avg_post == pytest.approx(1.0, abs=1e-6)

    def test_factor_effect_recovery(self):
        dgp = FactorDGP(n_donors=20, n_periods=39, t0=30, effect=0.5)
        hits = []
        for s in range(10):
            spec = dgp.build(100 + s)
            panel, _ = generate_factor_panel(spec)
            _, gaps = estimate_gaps(panel, spec.treatment_spec(), default_predictors(spec))
            hits.append(abs(gaps.effect_avg_post - 0.5) <= 0.05)
        assert np.mean(hits) >= 0.9

    def test_gap_identity_and_report_fields(self):
        spec = FactorDGP(seed=2, effect=0.5).build()
        panel, _ = generate_factor_panel(spec)
        sol, gaps = estimate_gaps(panel, spec.treatment_spec(), default_predictors(spec))
        assert np.array_equal(gaps.gap, gaps.observed - gaps.synthetic)
        for x in (gaps.effect_avg_post, gaps.pre_rmse, gaps.post_rmse):
            assert math.isfinite(x)
        shares = {d: round(100 * w) for d, w in sol.weights_by_donor().items() if w > 0.005}
        assert 1 <= len(shares) <= 10

    def test_affine_shift_invariance(self):
        spec = FactorDGP(seed=6, effect=0.5).build()
        panel, _ = generate_factor_panel(spec)
        ts = spec.treatment_spec()
        preds = PredictorSpec(outcome_mean=True)
        s1, g1 = estimate_gaps(panel, ts, preds)
        s2, g2 = estimate_gaps(panel.with_outcomes(panel.outcomes + 3.0), ts, preds)
        np.testing.assert_allclose(s1.w, s2.w, atol=1e-6)
        np.testing.assert_allclose(g2.synthetic, g1.synthetic + 3.0, atol=1e-9)
        np.testing.assert_allclose(g1.gap, g2.gap, atol=1e-9)

    def test_donor_permutation(self):
        spec = FactorDGP(seed=7, effect=0.5).build()
        panel, _ = generate_factor_panel(spec)
        ts = spec.treatment_spec()
        preds = PredictorSpec(outcome_mean=True)
        s1, g1 = estimate_gaps(panel, ts, preds)
        rev = ts.with_treated(ts.treated_unit, ts.donor_pool[::-1])
        s2, g2 = estimate_gaps(panel, rev, preds)
        np.testing.assert_allclose(s1.w, s2.w[::-1], atol=1e-6)
        np.testing.assert_allclose(g1.gap, g2.gap, atol=1e-9)

    def test_fit_speed(self, warm_jit):
        spec = FactorDGP(seed=3).build()
        panel, _ = generate_factor_panel(spec)
        t = time.perf_counter()
        for _ in range(5):
            estimate_gaps(panel, spec.treatment_spec(), default_predictors(spec))
        assert (time.perf_counter() - t) / 5 < 0.5
