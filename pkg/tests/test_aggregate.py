import json

import numpy as np
import pandas as pd
import pytest

from staggered.aggregate import (
    CSV_COLUMNS,
    EventStudyEntry,
    EventStudyResult,
    SchemaMismatch,
    aggregate,
    read_event_study,
    validate_frame,
)
from staggered.drdid import GroupTimeATT, att_surface
from staggered.panel import cohort_sizes

from conftest import random_panel


def cell(g, t, est, psi):
    return GroupTimeATT(g, t, est, np.asarray(psi, float), 0.0, 1, 1)


class TestAggregate:
    def test_flat_single_cohort(self, rng):
        cells = [cell(4, t, 2.5, rng.standard_normal(6)) for t in (2, 4, 5, 6)]
        res = aggregate(cells, {4: 3}, B=200)
        assert all(r.estimate == 2.5 for r in res.entries if not r.reference)

    def test_size_weights(self, rng):
        cells = [cell(3, 5, 2.0, rng.standard_normal(8)), cell(4, 6, 6.0, rng.standard_normal(8))]
        res = aggregate(cells, {3: 3, 4: 1}, B=200)
        assert res[2].estimate == pytest.approx(3.0)
        assert res[2].weights == {3: 0.75, 4: 0.25}

    def test_truncation_two_cohort_toy(self, rng):
        # cohort 6 has no cell at e = 3 when T = 8; all weight moves to cohort 3
        psi = rng.standard_normal((4, 8))
        cells = [cell(3, 5, 1.0, psi[0]), cell(6, 8, 4.0, psi[1]), cell(3, 6, 2.0, psi[2])]
        res = aggregate(cells, {3: 2, 6: 2}, B=200, horizon=8)
        assert res[2].estimate == pytest.approx(2.5)
        assert res[3].estimate == pytest.approx(2.0)
        assert res[3].weights == {3: 1.0}
        np.testing.assert_allclose(res.influence[:, res.event_times.index(3)], psi[2])

    def test_linearity(self, rng):
        d = random_panel(rng, {3: 3, 5: 2}, 4, 7)
        cells = att_surface(d)
        a = aggregate(cells, cohort_sizes(d), B=200)
        scaled = [cell(c.g, c.t, 3.0 * c.estimate, 3.0 * c.influence) for c in cells]
        b = aggregate(scaled, cohort_sizes(d), B=200)
        for e in a.event_times:
            assert b[e].estimate == pytest.approx(3.0 * a[e].estimate, abs=1e-12)
            assert b[e].se == pytest.approx(3.0 * a[e].se, abs=1e-12)

    def test_reference_row_and_bands(self, rng):
        d = random_panel(rng, {3: 3, 5: 2}, 4, 7)
        res = aggregate(att_surface(d), cohort_sizes(d), B=200)
        ref = res[-1]
        assert ref.reference and ref.estimate == 0 and ref.se == 0
        assert res.event_times == sorted(set(res.event_times))
        for r in res.entries:
            assert r.ci_low <= r.estimate <= r.ci_high
            assert r.sim_low <= r.ci_low and r.ci_high <= r.sim_high
            if r.weights:
                assert sum(r.weights.values()) == pytest.approx(1.0, abs=1e-12)
                assert min(r.weights.values()) >= 0

    def test_mismatched_influence(self):
        with pytest.raises(ValueError, match="influence length"):
            aggregate([cell(3, 4, 1.0, np.ones(4)), cell(3, 5, 1.0, np.ones(5))], {3: 1})

    def test_empty_event_time_flagged(self, rng):
        cells = [cell(3, 4, 1.0, rng.standard_normal(5))]
        res = aggregate(cells, {3: 1}, event_times=[1, 7], B=200)
        assert res.event_times == [1]
        assert any("event time 7" in f for f in res.flagged)

    def test_failed_cells_skipped(self, rng):
        bad = GroupTimeATT(3, 5, np.nan, np.zeros(5), np.nan, 1, 0, error="empty pool")
        res = aggregate([cell(3, 4, 1.0, rng.standard_normal(5)), bad], {3: 1}, B=200)
        assert res.event_times == [1]


class TestContract:
    def result(self):
        entries = [EventStudyEntry(e, 0.1 * e, 0.05, 0.1 * e - 0.1, 0.1 * e + 0.1, 0.1 * e - 0.2,
                                   0.1 * e + 0.2, 1) for e in (2, -1, 0)]
        return EventStudyResult(entries, "drdid", 10)

    def test_sorted_and_unique(self):
        res = self.result()
        assert res.event_times == [-1, 0, 2]
        with pytest.raises(ValueError):
            EventStudyResult(res.entries + [res.entries[0]], "x", 1)

    def test_csv_header_and_round_trip(self, tmp_path):
        res = self.result()
        res.to_csv(tmp_path / "r.csv")
        head = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert head == "event_time,estimate,se,ci_low,ci_high,sim_low,sim_high"
        df = read_event_study(tmp_path / "r.csv")
        assert list(df.event_time) == [-1, 0, 2]
        res.to_json(tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())["method"] == "drdid"

    def test_window(self):
        assert self.result().window(-1, 0).event_times == [-1, 0]

    def test_schema_mismatch_names_column(self):
        df = pd.DataFrame(columns=CSV_COLUMNS).rename(columns={"ci_low": "lower"})
        with pytest.raises(SchemaMismatch, match="'ci_low'"):
            validate_frame(df)
        df = pd.DataFrame(columns=CSV_COLUMNS + ["extra"])
        with pytest.raises(SchemaMismatch, match="'extra'"):
            validate_frame(df)
