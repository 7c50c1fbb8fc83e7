"""Negative-binomial two-way fixed-effects event study with a log-exposure offset."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import stats

from .aggregate import EventStudyEntry, EventStudyResult
from .drdid import multiplier_bootstrap
from .glm import RegressionFit, irr, negbin_fit
from .iwes import REFERENCE, tv_columns, twfe_dummies
from .panel import NEVER, PanelDataset


def event_dummies(dataset: PanelDataset) -> tuple[np.ndarray, list[int]]:
    """Relative-period indicators pooled over cohorts; never-treated rows are all zero."""
    n, T = dataset.n_units, dataset.n_periods
    cohort = np.repeat(dataset.cohort, T)
    t = np.tile(np.arange(1, T + 1), n)
    rel = np.where(cohort != NEVER, t - cohort, np.iinfo(int).min)
    es = sorted(int(e) for e in np.unique(rel[cohort != NEVER]) if e != REFERENCE)
    return np.column_stack([(rel == e).astype(float) for e in es]), es


def nb_event_study(
    dataset: PanelDataset,
    covariates: Sequence[str] = (),
    level: float = 0.95,
    B: int = 1000,
    seed=0,
    event_times=None,
) -> tuple[EventStudyResult, RegressionFit]:
    """Event-time log rate ratios from an NB2 fit with unit and period dummies.

    Counts are modelled as ``log mu = unit + period + sum_e b_e 1{t - G = e} + offset``
    with ``offset = log(exposure)`` when exposure is present; relative period
    -1 is omitted. Standard errors cluster by unit.
    """
    n, T = dataset.n_units, dataset.n_periods
    base, base_names = twfe_dummies(dataset)
    X_cov, cov_names = tv_columns(dataset, covariates)
    E, es = event_dummies(dataset)
    X = np.column_stack([base, X_cov, E])
    names = base_names + cov_names + [f"e{e}" for e in es]
    offset = np.zeros(n * T) if dataset.exposure is None else np.repeat(np.log(dataset.exposure), T)
    y = dataset.outcome.ravel()
    fit = negbin_fit(X, y, offset=offset, clusters=np.repeat(np.arange(n), T), names=names)

    wanted = es if event_times is None else [e for e in sorted(set(event_times)) if e in es]
    keep = [e for e in wanted if not fit.is_aliased(f"e{e}")]
    flagged = [f"event time {e}: aliased" for e in wanted if fit.is_aliased(f"e{e}")]
    idx = [fit.index(f"e{e}") for e in keep]
    psi = fit.influence[:, idx]
    z = stats.norm.ppf(0.5 + level / 2)
    se = np.array([fit.se(f"e{e}") for e in keep])
    crit = z
    if len(keep) and np.any(se > 0):
        crit = max(multiplier_bootstrap(psi, B=B, level=level, seed=seed).critical_value, z)
    entries = []
    for k, e in enumerate(keep):
        b = fit.coef(f"e{e}")
        s = se[k]
        entries.append(EventStudyEntry(e, b, s, b - z * s, b + z * s, b - crit * s, b + crit * s, 0))
    if event_times is None or REFERENCE in set(event_times):
        entries.append(EventStudyEntry(REFERENCE, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, reference=True))
        psi = np.column_stack([psi, np.zeros(psi.shape[0])])
    order = np.argsort([r.e for r in entries], kind="stable")
    res = EventStudyResult([entries[k] for k in order], "nb", T, level, crit, flagged, psi[:, order])
    return res, fit


def irr_table(fit: RegressionFit, level: float = 0.95) -> list[dict]:
    """Exponentiated event-time coefficients with their intervals."""
    rows = []
    for name in fit.names:
        if not name.startswith("e") or fit.is_aliased(name):
            continue
        ratio, (lo, hi) = irr(fit, name, level)
        rows.append({"event_time": int(name[1:]), "irr": ratio, "ci_low": lo, "ci_high": hi})
    return rows
