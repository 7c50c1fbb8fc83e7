import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staggered.ascm import (
    DonorContamination,
    ScmProblem,
    att_k,
    build_problems,
    donor_pool,
    fit_partially_pooled,
    fit_quality,
    gcv_lambda_grid,
    impute_counterfactual,
    jackknife_se,
    pooled_objective,
    quality_from_imbalance,
    scm_objective,
    scm_weights,
    select_lambda,
    solve_pooled,
    unit_effect,
)
from staggered.panel import NEVER
from staggered.simgen import SimSpec, generate

from conftest import make_panel


def grid_minimum(problem, step=0.01):
    best = np.inf
    k = int(round(1 / step))
    for a in range(k + 1):
        for b in range(k + 1 - a):
            g = np.array([a, b, k - a - b]) / k
            best = min(best, scm_objective(problem, g))
    return best


def small_spec(**kw):
    base = dict(n_units=20, n_periods=16, cohorts={6: 3, 8: 3, 10: 3}, sigma=0.4)
    base.update(kw)
    return SimSpec(**base)


class TestWeights:
    def test_two_donor_closed_form(self):
        p = ScmProblem("j", 2, [2.0], [[0.0, 4.0]], ["a", "b"])
        np.testing.assert_allclose(scm_weights(p), [0.5, 0.5], atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_three_donor_grid(self, seed):
        r = np.random.default_rng(seed)
        p = ScmProblem("j", 9, r.standard_normal(8), r.standard_normal((8, 3)), ["a", "b", "c"], lam=0.05 * seed)
        w = scm_weights(p)
        assert scm_objective(p, w) <= grid_minimum(p) + 1e-12
        assert grid_minimum(p) - scm_objective(p, w) < 1e-4

    def test_exact_replica(self, rng):
        D = rng.standard_normal((6, 5))
        p = ScmProblem("j", 7, D[:, 2].copy(), D, list("abcde"))
        w = scm_weights(p)
        assert w[2] >= 1 - 1e-6
        assert scm_objective(p, w) < 1e-12

    def test_huge_penalty_uniform(self, rng):
        p = ScmProblem("j", 7, rng.standard_normal(6), rng.standard_normal((6, 4)), list("abcd"), lam=1e9)
        np.testing.assert_allclose(scm_weights(p), 0.25, atol=1e-6)

    def test_imbalance_monotone_in_lambda(self, rng):
        p0 = ScmProblem("j", 9, rng.standard_normal(8), rng.standard_normal((8, 6)), list("abcdef"))
        prev = -1.0
        for lam in (0.0, 0.1, 1.0, 10.0):
            p = ScmProblem(p0.unit, p0.treat_period, p0.y, p0.donors, p0.donor_units, lam)
            w = scm_weights(p)
            imb = float(np.mean((p.y - p.donors @ w) ** 2))
            assert imb >= prev - 1e-10
            prev = imb

    def test_problem_validation(self):
        with pytest.raises(ValueError):
            ScmProblem("j", 2, [], np.zeros((0, 1)), ["a"])
        with pytest.raises(ValueError):
            ScmProblem("j", 3, [1.0, 2.0], [[1.0], [np.nan]], ["a"])
        with pytest.raises(ValueError):
            ScmProblem("j", 3, [1.0], [[1.0]], ["a"], lam=-1)


class TestEffects:
    def test_imputation(self):
        assert impute_counterfactual([0, 1, 0], [3.0, 7.5, 1.0]) == 7.5
        assert impute_counterfactual([0.5, 0.5], [4, 6]) == 5
        assert impute_counterfactual([0.25, 0.75], [8, 0]) == 2

    def test_unit_effects_and_att(self):
        assert unit_effect(3.0, 3.0) == 0
        assert att_k([1.0, 3.0]) == 2
        with pytest.raises(ValueError):
            att_k([])

    def test_jackknife(self):
        assert jackknife_se([0.0, 2.0]) == pytest.approx(1.0)
        assert jackknife_se([1.5, 1.5, 1.5]) == 0
        assert np.isnan(jackknife_se([1.0]))
        x = np.array([0.3, -1.2, 2.0, 0.7])
        assert jackknife_se(x[::-1]) == pytest.approx(jackknife_se(x), abs=1e-15)
        # the mean's jackknife SE equals the classical s / sqrt(J)
        assert jackknife_se(x) == pytest.approx(x.std(ddof=1) / 2, rel=1e-12)

    def test_horizon_truncation(self):
        y = np.array([
            [0, 0, 0, 5, 5, 5],    # treated at 4
            [0, 0, 0, 0, 0, 9],    # treated at 6
            [0, 0, 0, 0, 0, 0],
        ], float)
        d = make_panel(y, [4, 6, NEVER])
        fit = fit_partially_pooled(d, nu=0.0, max_event=2)
        assert fit.n_units[0] == 2 and fit.att[0] == pytest.approx(7.0)
        assert fit.n_units[2] == 1 and fit.att[2] == pytest.approx(5.0)
        assert any("single treated unit" in f for f in fit.flagged)


class TestFitQuality:
    def test_perfect(self):
        assert quality_from_imbalance([np.zeros(3), np.zeros(3)]) == (0.0, 0.0)

    def test_cancelling(self):
        q_sep, q_pool = quality_from_imbalance([np.full(4, 0.7), np.full(4, -0.7)])
        assert q_sep == pytest.approx(0.7) and q_pool == pytest.approx(0.0)

    def test_hand_example(self):
        q_sep, q_pool = quality_from_imbalance([np.array([1.0, 1.0]), np.array([1.0, 3.0])])
        assert q_sep == pytest.approx(np.sqrt(3))
        assert q_pool == pytest.approx(np.sqrt((1 + 4) / 2))

    def test_unequal_lags_average_over_available_units(self):
        _, q_pool = quality_from_imbalance([np.array([1.0, 2.0, 3.0]), np.array([3.0])])
        assert q_pool == pytest.approx(np.sqrt((4 + 4 + 9) / 3))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**6))
    def test_pool_below_sep_when_aligned(self, seed):
        r = np.random.default_rng(seed)
        J, L, m = r.integers(1, 5), r.integers(1, 6), r.integers(1, 5)
        problems = [ScmProblem(f"j{k}", L + 1, r.standard_normal(L), r.standard_normal((L, m)), list("abcd")[:m])
                    for k in range(J)]
        weights = [r.dirichlet(np.ones(m)) for _ in range(J)]
        q_sep, q_pool = fit_quality(problems, weights)
        assert q_pool <= q_sep + 1e-12


class TestPooled:
    def test_nu_zero_matches_separate(self):
        d, _ = generate(small_spec(seed=3))
        fit = fit_partially_pooled(d, nu=0.0)
        problems = build_problems(d)
        for p, w in zip(problems, fit.weight_vectors()):
            np.testing.assert_allclose(w, scm_weights(p), atol=1e-6)

    def test_solve_pooled_nu_zero_is_separate(self):
        d, _ = generate(small_spec(seed=4))
        problems = build_problems(d, lam=0.3)
        joint = solve_pooled(problems, 0.0, 0.3, tol=1e-9)
        for p, w in zip(problems, joint):
            np.testing.assert_allclose(w, scm_weights(p, tol=1e-10), atol=1e-6)

    def test_single_treated_unit_nu_irrelevant(self, rng):
        y = rng.standard_normal((6, 10))
        d = make_panel(y, [7] + [NEVER] * 5)
        fits = [fit_partially_pooled(d, nu=nu) for nu in (0.0, 0.5, 1.0)]
        for f in fits[1:]:
            np.testing.assert_allclose(f.weight_vectors()[0], fits[0].weight_vectors()[0], atol=1e-6)

    def test_two_treated_dominance(self, rng):
        y = rng.standard_normal((8, 9))
        d = make_panel(y, [6, 6] + [NEVER] * 6)
        fit = fit_partially_pooled(d, nu=0.5)
        problems = fit.problems
        sep = fit.separate_weights
        q_sep0, q_pool0 = fit_quality(problems, sep)
        args = dict(nu=0.5, lam=0.0, scale_sep=q_sep0**2, scale_pool=q_pool0**2)
        got = pooled_objective(problems, fit.weight_vectors(), **args)
        assert got <= pooled_objective(problems, sep, **args) + 1e-10
        uniform = [np.full(p.donors.shape[1], 1 / p.donors.shape[1]) for p in problems]
        assert got <= pooled_objective(problems, uniform, **args) + 1e-10
        for a, b in itertools.product(np.linspace(0, 1, 6), repeat=2):
            cand = [sep[0] * a + uniform[0] * (1 - a), sep[1] * b + uniform[1] * (1 - b)]
            assert got <= pooled_objective(problems, cand, **args) + 1e-10

    def test_feasible_and_recomputable(self):
        d, _ = generate(small_spec(seed=5))
        fit = fit_partially_pooled(d, nu=0.7, lam=0.1)
        for p, w in zip(fit.problems, fit.weight_vectors()):
            assert w.min() >= -1e-8 and w.sum() == pytest.approx(1.0, abs=1e-8)
            assert all(d.cohort[d.units.index(u)] == NEVER or d.cohort[d.units.index(u)] > p.treat_period + 12
                       for u in p.donor_units)
        q_sep, q_pool = fit_quality(fit.problems, fit.weight_vectors())
        assert fit.q_sep == pytest.approx(q_sep, abs=1e-8)
        assert fit.q_pool == pytest.approx(q_pool, abs=1e-8)
        assert fit.q_pool <= fit_partially_pooled(d, nu=0.0, lam=0.1).q_pool + 1e-8

    def test_perfect_separate_fit_warns(self):
        y = np.array([[1, 2, 3, 9], [1, 2, 3, 3], [0, 5, 1, 1]], float)
        d = make_panel(y, [4, NEVER, NEVER])
        with pytest.warns(RuntimeWarning, match="unnormalised"):
            fit = fit_partially_pooled(d, nu=0.5)
        assert not fit.normalized

    def test_argument_checks(self):
        d, _ = generate(small_spec(seed=1))
        with pytest.raises(ValueError):
            fit_partially_pooled(d, nu=1.5)
        with pytest.raises(ValueError):
            fit_partially_pooled(d, lam=-0.1)


class TestDonors:
    def test_pool_rule(self):
        d = make_panel(np.zeros((4, 30)), [5, 10, 20, NEVER])
        assert list(donor_pool(d, 5, 12)) == [False, False, True, True]
        assert list(donor_pool(d, 5, 2)) == [False, True, True, True]

    def test_contamination_detected(self, rng, monkeypatch):
        import staggered.ascm as ascm

        y = rng.standard_normal((3, 12))
        y[1, :3] = y[0, :3]  # u1 replicates u0 before adoption, so it carries the weight
        d = make_panel(y, [4, 8, NEVER])
        original = ascm.donor_pool
        # a pool built for a 2-period horizon admits cohort 8, which adopts inside the 12-period horizon
        monkeypatch.setattr(ascm, "donor_pool", lambda data, tp, me: original(data, tp, 2))
        with pytest.raises(DonorContamination, match="u1"):
            ascm.fit_partially_pooled(d, nu=0.0, max_event=12)


class TestLambda:
    def test_grid_scaled(self):
        d, _ = generate(small_spec(seed=2))
        grid = gcv_lambda_grid(d)
        assert grid[0] == 0 and len(grid) == 6
        assert np.allclose(np.diff(np.log(grid[1:])), np.log(10))

    def test_select_from_grid(self):
        d, _ = generate(small_spec(seed=2))
        lam = select_lambda(d, grid=[0.0, 0.5, 5.0])
        assert lam in (0.0, 0.5, 5.0)


@pytest.mark.slow
def test_zero_effect_coverage():
    """|ATT_k| < 3 se(k) for at least 90% of event times across 200 null panels."""
    hits = total = 0
    for seed in range(200):
        d, _ = generate(small_spec(seed=10_000 + seed, effect_value=0.0))
        fit = fit_partially_pooled(d, nu=0.5)
        for k in range(0, 7):
            if np.isfinite(fit.se.get(k, np.nan)):
                total += 1
                hits += abs(fit.att[k]) < 3 * fit.se[k]
    assert hits / total >= 0.9
