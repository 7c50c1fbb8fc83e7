"""Interaction-weighted event study: saturated cohort x relative-period regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .aggregate import EventStudyResult, aggregate
from .drdid import GroupTimeATT
from .glm import RegressionFit, wls_fit
from .panel import NEVER, PanelDataset, cohort_sizes

log = logging.getLogger(__name__)

REFERENCE = -1


def twfe_dummies(dataset: PanelDataset) -> tuple[np.ndarray, list[str]]:
    """Intercept, unit and period dummies (first unit and period dropped), long layout.

    Rows are ordered unit-major, matching ``dataset.outcome.ravel()``.
    """
    n, T = dataset.n_units, dataset.n_periods
    unit = np.repeat(np.arange(n), T)
    time = np.tile(np.arange(T), n)
    cols = [np.ones(n * T)]
    names = ["const"]
    U = np.zeros((n * T, n - 1))
    U[unit > 0, unit[unit > 0] - 1] = 1.0
    P = np.zeros((n * T, T - 1))
    P[time > 0, time[time > 0] - 1] = 1.0
    names += [f"unit[{u}]" for u in dataset.units[1:]]
    names += [f"time[{t}]" for t in range(2, T + 1)]
    return np.column_stack(cols + [U, P]), names


def tv_columns(dataset: PanelDataset, covariates: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    n, T = dataset.n_units, dataset.n_periods
    cols, names = [], []
    for c in covariates:
        if c in dataset.tv_names:
            cols.append(dataset.covariates_tv[:, :, dataset.tv_names.index(c)].ravel())
        elif c in dataset.static_names:
            # absorbed by unit effects; kept so aliasing is reported rather than hidden
            cols.append(np.repeat(dataset.covariates_static[:, dataset.static_names.index(c)], T))
        else:
            raise KeyError(f"unknown covariate {c!r}")
        names.append(c)
    return (np.column_stack(cols) if cols else np.zeros((n * T, 0))), names


@dataclass
class IwesFit:
    beta: dict[tuple[int, int], float]
    covariance: np.ndarray
    keys: list[tuple[int, int]]
    influence: np.ndarray
    regression: RegressionFit = field(repr=False)
    sizes: dict[int, int] = field(default_factory=dict)
    horizon: int = 0
    excluded_period: int = REFERENCE
    control_cohort: str = "never"
    controls: tuple[str, ...] = ()
    aliased: list[tuple[int, int]] = field(default_factory=list)

    def se(self, g: int, e: int) -> float:
        k = self.keys.index((g, e))
        return float(np.sqrt(self.covariance[k, k]))


def iwes_fit(dataset: PanelDataset, covariates: Sequence[str] = (), cluster: str = "unit") -> IwesFit:
    """Two-way fixed-effects regression with a full set of cohort x event-time indicators.

    Relative period -1 of every treated cohort is the omitted reference and
    never-treated units are the control cohort. Standard errors cluster by unit.
    """
    if cluster != "unit":
        raise ValueError("only unit clustering is supported")
    if not dataset.never_treated.any():
        raise ValueError("interaction-weighted estimation needs never-treated units as the control cohort")
    n, T = dataset.n_units, dataset.n_periods
    base, base_names = twfe_dummies(dataset)
    X_cov, cov_names = tv_columns(dataset, covariates)

    cohort_long = np.repeat(dataset.cohort, T)
    t_long = np.tile(np.arange(1, T + 1), n)
    keys, cols = [], []
    for g in dataset.treated_cohorts():
        for e in range(1 - g, T - g + 1):
            if e == REFERENCE:
                continue
            keys.append((g, e))
            cols.append(((cohort_long == g) & (t_long - g == e)).astype(float))
    inter = np.column_stack(cols) if cols else np.zeros((n * T, 0))
    names = base_names + cov_names + [f"g{g}:e{e}" for g, e in keys]
    X = np.column_stack([base, X_cov, inter])
    fit = wls_fit(X, dataset.outcome.ravel(), clusters=np.repeat(np.arange(n), T), names=names)

    offset = base.shape[1] + X_cov.shape[1]
    idx = np.arange(offset, offset + len(keys))
    aliased = [k for k, i in zip(keys, idx) if np.isnan(fit.coefficients[i])]
    if aliased:
        log.info("iwes_fit: aliased cohort x event cells %s", aliased)
    good = [(k, i) for k, i in zip(keys, idx) if not np.isnan(fit.coefficients[i])]
    gkeys = [k for k, _ in good]
    gidx = np.array([i for _, i in good], dtype=int)
    return IwesFit(
        beta={k: float(fit.coefficients[i]) for k, i in good},
        covariance=fit.covariance[np.ix_(gidx, gidx)],
        keys=gkeys,
        influence=fit.influence[:, gidx],
        regression=fit,
        sizes=cohort_sizes(dataset),
        horizon=T,
        controls=tuple(covariates),
        aliased=aliased,
    )


def iwes_cells(fit: IwesFit) -> list[GroupTimeATT]:
    """Express the cohort x event coefficients as group-time cells for aggregation."""
    out = []
    for k, (g, e) in enumerate(fit.keys):
        psi = fit.influence[:, k]
        out.append(
            GroupTimeATT(
                g=g, t=g + e, estimate=fit.beta[(g, e)], influence=psi,
                se=float(np.sqrt(fit.covariance[k, k])),
                n_treated=fit.sizes.get(g, 0), n_control=0, method="iwes",
            )
        )
    return out


def iwes_aggregate(
    fit: IwesFit,
    shares: Mapping[int, float] | None = None,
    event_times=None,
    level: float = 0.95,
    B: int = 1000,
    seed=0,
) -> EventStudyResult:
    """Cohort-share weighted event-time averages of the interaction coefficients.

    ``shares`` maps cohort to size (or any proportional weight); it is
    renormalised over the cohorts observed at each event time. Variances use
    the coefficient covariance with shares treated as known.
    """
    sizes = fit.sizes if shares is None else shares
    res = aggregate(
        iwes_cells(fit), sizes, event_times=event_times, level=level, B=B, seed=seed,
        method="iwes", horizon=fit.horizon, reference=REFERENCE,
    )
    for g, e in fit.aliased:
        res.flagged.append(f"cell (g={g}, e={e}) aliased")
    return res


def delta_method_se(fit: IwesFit, weights: Mapping[int, float], e: int) -> float:
    """sqrt(w' V w) over the coefficients of event time ``e``."""
    idx = [fit.keys.index((g, e)) for g in weights]
    w = np.array([weights[g] for g in weights])
    V = fit.covariance[np.ix_(idx, idx)]
    return float(np.sqrt(w @ V @ w))
