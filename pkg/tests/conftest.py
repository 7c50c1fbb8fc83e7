import numpy as np
import pytest

from staggered.panel import NEVER, PanelDataset


def make_panel(outcome, cohort, units=None, **kw):
    outcome = np.asarray(outcome, dtype=float)
    n, T = outcome.shape
    units = units or [f"u{j}" for j in range(n)]
    return PanelDataset(units=units, times=np.arange(1, T + 1), outcome=outcome, cohort=cohort, **kw)


def random_panel(rng, cohorts, n_never, T, static=0, tv=0):
    """Random balanced panel with the given cohort sizes (dict g -> n) and never-treated count."""
    labels = [g for g, k in sorted(cohorts.items()) for _ in range(k)] + [NEVER] * n_never
    n = len(labels)
    kw = {}
    if static:
        kw["covariates_static"] = rng.standard_normal((n, static))
        kw["static_names"] = [f"s{k}" for k in range(static)]
    if tv:
        kw["covariates_tv"] = rng.standard_normal((n, T, tv))
        kw["tv_names"] = [f"z{k}" for k in range(tv)]
    return make_panel(rng.standard_normal((n, T)), np.array(labels), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
