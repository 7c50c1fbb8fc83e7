import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staggered.drdid import (
    CellError,
    OverlapError,
    admissible_periods,
    att_surface,
    base_period_for,
    group_time_att,
    multiplier_bootstrap,
    rademacher,
)
from staggered.panel import NEVER

from conftest import make_panel, random_panel


def check_influence(cell):
    n = len(cell.influence)
    assert abs(cell.influence.mean()) < 1e-10
    assert cell.se == pytest.approx(np.sqrt(np.mean(cell.influence**2) / n), abs=1e-10)


class TestCell:
    def test_two_by_two(self):
        d = make_panel([[1, 1], [1, 3]], [NEVER, 2])
        c = group_time_att(d, 2, 2)
        assert c.estimate == pytest.approx(2.0, abs=1e-12)
        assert c.base == 1 and c.n_treated == 1 and c.n_control == 1

    def test_constant_covariate_changes_nothing(self, rng):
        d = random_panel(rng, {3: 3}, 4, 5)
        d = d.replace(covariates_static=np.ones((7, 1)), static_names=["one"])
        for t in (1, 4, 5):
            a = group_time_att(d, 3, t, base_period="universal")
            b = group_time_att(d, 3, t, covariates=["one"], base_period="universal")
            assert b.estimate == pytest.approx(a.estimate, abs=1e-12)
            np.testing.assert_allclose(b.influence, a.influence, atol=1e-12)

    def test_six_unit_binary_covariate_oracle(self):
        # two units in cohort 3, four never treated; one binary covariate
        y = np.array([
            [1.0, 2.0, 3.5, 6.0],
            [0.5, 1.0, 4.0, 3.0],
            [2.0, 2.5, 2.0, 3.0],
            [1.0, 0.0, 1.5, 1.0],
            [0.0, 1.0, 1.0, 2.5],
            [3.0, 2.0, 4.0, 5.0],
        ])
        x = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        d = make_panel(y, [3, 3, NEVER, NEVER, NEVER, NEVER], covariates_static=x[:, None], static_names=["x"])
        for t in (3, 4):
            dy = y[:, t - 1] - y[:, 1]
            D = np.array([1, 1, 0, 0, 0, 0], float)
            # saturated binary-covariate models: propensity = treated share, m = control mean, per x cell
            p = {v: D[x == v].mean() for v in (0.0, 1.0)}
            m = {v: dy[(x == v) & (D == 0)].mean() for v in (0.0, 1.0)}
            ps = np.array([p[v] for v in x])
            mx = np.array([m[v] for v in x])
            odds = ps / (1 - ps) * (1 - D)
            want = np.sum(D * (dy - mx)) / D.sum() - np.sum(odds * (dy - mx)) / odds.sum()
            cell = group_time_att(d, 3, t, covariates=["x"])
            assert cell.estimate == pytest.approx(want, abs=1e-10)
            check_influence(cell)

    def test_methods_agree_without_covariates(self, rng):
        d = random_panel(rng, {3: 4, 5: 3}, 6, 7)
        for g, t in [(3, 4), (3, 6), (5, 3), (5, 7)]:
            est = [group_time_att(d, g, t, method=m).estimate for m in ("dr", "or", "ipw")]
            assert max(est) - min(est) < 1e-10

    def test_no_covariate_influence_closed_form(self, rng):
        d = random_panel(rng, {3: 4}, 6, 5)
        c = group_time_att(d, 3, 5)
        dy = d.y(5) - d.y(2)
        D = d.cohort == 3
        psi = np.where(D, (dy - dy[D].mean()) / D.mean(), -(dy - dy[~D].mean()) / (~D).mean())
        np.testing.assert_allclose(c.influence, psi, atol=1e-10)
        check_influence(c)

    def test_translation_invariance(self, rng):
        d = random_panel(rng, {3: 5, 4: 4}, 8, 6, static=1)
        shifted = d.replace(outcome=d.outcome + 17.5)
        for g, t in [(3, 5), (4, 2), (4, 6)]:
            a = group_time_att(d, g, t, covariates=["s0"])
            b = group_time_att(shifted, g, t, covariates=["s0"])
            assert b.estimate == pytest.approx(a.estimate, abs=1e-10)

    def test_relabeling_permutes_influence(self, rng):
        d = random_panel(rng, {3: 5}, 8, 5, static=1)
        perm = rng.permutation(d.n_units)
        p = d.replace(
            units=[d.units[k] for k in perm], outcome=d.outcome[perm], cohort=d.cohort[perm],
            covariates_static=d.covariates_static[perm],
        )
        a = group_time_att(d, 3, 4, covariates=["s0"])
        b = group_time_att(p, 3, 4, covariates=["s0"])
        assert b.estimate == pytest.approx(a.estimate, abs=1e-10)
        assert b.se == pytest.approx(a.se, abs=1e-10)
        np.testing.assert_allclose(b.influence, a.influence[perm], atol=1e-10)

    def test_varying_base_for_pre_cells(self):
        assert base_period_for(5, 3) == 2
        assert base_period_for(5, 7) == 4
        assert base_period_for(5, 3, base_period="universal") == 4
        assert base_period_for(5, 7, delta=1) == 3

    def test_errors(self, rng):
        d = random_panel(rng, {3: 2}, 0, 5)
        with pytest.raises(CellError, match="control pool"):
            group_time_att(d, 3, 4)
        d = random_panel(rng, {3: 2}, 3, 5)
        with pytest.raises(CellError):
            group_time_att(d, 4, 5)
        with pytest.raises(ValueError):
            group_time_att(d, 3, 4, method="bogus")

    def test_overlap_failure(self):
        x = np.array([0, 0, 1, 1, 1, 0, 0, 0], float)
        y = np.arange(24.0).reshape(8, 3) ** 1.3
        # treated units sit exactly where x = 1
        d = make_panel(y, [3, 3, 3, 3, NEVER, NEVER, NEVER, NEVER],
                       covariates_static=np.column_stack([x, [1, 1, 1, 1, 0, 0, 0, 0]]), static_names=["x", "sep"])
        with pytest.raises(OverlapError, match="overlap"):
            group_time_att(d, 3, 3, covariates=["sep"])


class TestSurface:
    def test_admissible_cells(self):
        assert admissible_periods(5, 8) == [2, 3, 5, 6, 7, 8]
        assert admissible_periods(5, 8, base_period="universal") == [1, 2, 3, 5, 6, 7, 8]
        assert admissible_periods(2, 8, delta=1) == []

    def test_single_cohort_surface(self, rng):
        d = random_panel(rng, {5: 3}, 4, 8)
        cells = att_surface(d)
        assert [c.t for c in cells] == [2, 3, 5, 6, 7, 8]
        assert all(c.ok for c in cells)

    def test_no_never_treated_every_cell_errors(self, rng):
        d = random_panel(rng, {3: 2, 5: 2}, 0, 6)
        cells = att_surface(d, control_group="never")
        assert cells and all(not c.ok for c in cells)

    def test_not_yet_treated_pools(self, rng):
        d = random_panel(rng, {3: 2, 5: 3, 7: 4}, 1, 8)
        pools = {(c.g, c.t): c.n_control for c in att_surface(d, control_group="notyet") if c.ok}
        # pool = never (1) plus cohorts later than max(t, g)
        assert pools[(3, 4)] == 1 + 3 + 4
        assert pools[(3, 5)] == 1 + 4
        assert pools[(3, 7)] == 1
        assert pools[(5, 6)] == 1 + 4
        assert pools[(7, 8)] == 1
        assert pools[(7, 3)] == 1
        assert pools[(5, 2)] == 1 + 4


class TestBootstrap:
    def test_rademacher(self):
        V = rademacher(500, 7, 3)
        assert set(np.unique(V)) == {-1, 1}
        np.testing.assert_array_equal(V, rademacher(500, 7, 3))

    def test_single_parameter_near_normal(self, rng):
        psi = rng.standard_normal((400, 1))
        band = multiplier_bootstrap(psi, B=5000, seed=1)
        assert band.critical_value == pytest.approx(1.96, abs=0.08)

    def test_duplicate_parameters_same_critical_value(self, rng):
        psi = rng.standard_normal((300, 1))
        one = multiplier_bootstrap(psi, B=2000, seed=4).critical_value
        two = multiplier_bootstrap(np.column_stack([psi, psi]), B=2000, seed=4).critical_value
        assert two == pytest.approx(one, abs=1e-12)

    def test_deterministic_and_band_scaling(self, rng):
        psi = rng.standard_normal((100, 3))
        a = multiplier_bootstrap(psi, B=300, seed=9)
        b = multiplier_bootstrap(psi, B=300, seed=9)
        assert a.critical_value == b.critical_value
        np.testing.assert_allclose(a.half_width, a.critical_value * a.se)

    def test_input_checks(self, rng):
        with pytest.raises(ValueError, match="B >= 200"):
            multiplier_bootstrap(rng.standard_normal((10, 2)), B=100)
        with pytest.raises(ValueError, match="zero"):
            multiplier_bootstrap(np.zeros((10, 2)))

    def test_accepts_cells(self, rng):
        d = random_panel(rng, {3: 4}, 6, 5)
        band = multiplier_bootstrap(att_surface(d), B=200, seed=0)
        assert len(band.se) == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_influence_invariants_property(seed):
    r = np.random.default_rng(seed)
    d = random_panel(r, {3: 6, 4: 5}, 10, 5, static=1)
    for c in att_surface(d, covariates=["s0"]):
        if c.ok:
            check_influence(c)
