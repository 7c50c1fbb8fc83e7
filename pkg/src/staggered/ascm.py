"""Partially pooled synthetic control for staggered adoption.

Each treated unit ``j`` gets donor weights fit on its own pre-treatment lags.
The pooled fit trades off unit-level imbalance (``q_sep``) against imbalance
of the average treated unit (``q_pool``) through ``nu``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .aggregate import SCM_COLUMNS, EventStudyEntry, EventStudyResult
from .drdid import multiplier_bootstrap
from .panel import NEVER, PanelDataset
from .simplex import SimplexLSQ

log = logging.getLogger(__name__)

DEFAULT_MAX_EVENT = 12


class DonorContamination(ValueError):
    pass


@dataclass
class ScmProblem:
    """Single treated unit: lag vector ``y`` (lag 1 first) and donor lag matrix."""

    unit: str
    treat_period: int
    y: np.ndarray
    donors: np.ndarray
    donor_units: list[str]
    lam: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.donors = np.asarray(self.donors, dtype=float)
        if self.donors.ndim == 1:
            self.donors = self.donors[:, None]
        if len(self.y) < 1:
            raise ValueError("need at least one pre-treatment lag")
        if self.donors.shape != (len(self.y), len(self.donor_units)) or self.donors.shape[1] == 0:
            raise ValueError("donor matrix must be (lags x donors) and non-empty")
        if not np.all(np.isfinite(self.donors)):
            raise ValueError("donor outcomes incomplete over the lag window")
        if self.lam < 0:
            raise ValueError("ridge penalty must be non-negative")

    @property
    def n_lags(self) -> int:
        return len(self.y)


def scm_objective(problem: ScmProblem, gamma) -> float:
    r = problem.y - problem.donors @ gamma
    return float(r @ r / problem.n_lags + problem.lam * gamma @ gamma)


def scm_weights(problem: ScmProblem, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """Ridge-penalised synthetic control weights on the donor simplex.

    Minimises ``mean_l (y_l - D_l gamma)^2 + lam ||gamma||^2``.
    """
    L = problem.n_lags
    A = problem.donors / np.sqrt(L)
    b = problem.y / np.sqrt(L)
    qp = SimplexLSQ(A, b, np.ones((1, A.shape[1]), bool), mu=problem.lam)
    return qp.solve(tol=tol, max_iter=max_iter).x[0]


def impute_counterfactual(gamma, donor_outcomes) -> float:
    """Weighted donor average ``sum_i gamma_i Y_i``."""
    return float(np.dot(gamma, donor_outcomes))


def unit_effect(observed: float, imputed: float) -> float:
    return float(observed - imputed)


def att_k(effects) -> float:
    effects = np.asarray(effects, dtype=float)
    if effects.size == 0:
        raise ValueError("no treated unit observed at this event time")
    return float(effects.mean())


def jackknife_se(effects) -> float:
    """Leave-one-treated-unit-out jackknife SE of the mean effect; NaN for a single unit."""
    x = np.asarray(effects, dtype=float)
    J = len(x)
    if J < 2:
        return float("nan")
    loo = (x.sum() - x) / (J - 1)
    return float(np.sqrt((J - 1) / J * np.sum((loo - loo.mean()) ** 2)))


def imbalances(problems: Sequence[ScmProblem], weights: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [p.y - p.donors @ w for p, w in zip(problems, weights)]


def fit_quality(problems: Sequence[ScmProblem], weights: Sequence[np.ndarray]) -> tuple[float, float]:
    """``(q_sep, q_pool)`` for a set of per-unit weight vectors."""
    return quality_from_imbalance(imbalances(problems, weights))


def quality_from_imbalance(resid: Sequence[np.ndarray]) -> tuple[float, float]:
    """``q_sep``: RMS of unit-level imbalances (each unit averaged over its own
    lags, then over units). ``q_pool``: RMS over lags of the mean imbalance
    across the units that have that lag."""
    J = len(resid)
    q_sep = np.sqrt(sum(np.mean(r**2) for r in resid) / J)
    L = max(len(r) for r in resid)
    pooled = []
    for ell in range(L):
        vals = [r[ell] for r in resid if len(r) > ell]
        pooled.append(np.mean(vals))
    q_pool = np.sqrt(np.mean(np.square(pooled)))
    return float(q_sep), float(q_pool)


def _stack(problems):
    J = len(problems)
    m = max(p.donors.shape[1] for p in problems)
    mask = np.zeros((J, m), bool)
    for j, p in enumerate(problems):
        mask[j, : p.donors.shape[1]] = True
    return J, m, mask


def _sep_blocks(problems, weight=1.0):
    J = len(problems)
    out = []
    for p in problems:
        s = np.sqrt(weight / (J * p.n_lags))
        out.append((p.donors * s, p.y * s))
    return out


def _pool_rows(problems, m):
    J = len(problems)
    L = max(p.n_lags for p in problems)
    A = np.zeros((L, J * m))
    b = np.zeros(L)
    for ell in range(L):
        members = [j for j, p in enumerate(problems) if p.n_lags > ell]
        s = 1.0 / (len(members) * np.sqrt(L))
        for j in members:
            p = problems[j]
            A[ell, j * m: j * m + p.donors.shape[1]] = p.donors[ell] * s
            b[ell] += p.y[ell] * s
    return A, b


def pooled_objective(problems, weights, nu, lam, scale_sep=1.0, scale_pool=1.0) -> float:
    q_sep, q_pool = fit_quality(problems, weights)
    ridge = sum(float(w @ w) for w in weights) / len(problems)
    return nu * q_pool**2 / scale_pool + (1 - nu) * (q_sep**2 + lam * ridge) / scale_sep


def solve_pooled(problems: Sequence[ScmProblem], nu: float, lam: float, scale_sep=1.0, scale_pool=1.0,
                 tol=1e-7, max_iter=10_000, x0=None) -> list[np.ndarray]:
    """Minimise ``nu q_pool^2 / scale_pool + (1 - nu)(q_sep^2 + lam ridge) / scale_sep`` jointly.

    ``ridge`` is the average over units of ``||gamma_j||^2``, so with
    ``nu = 0`` each unit's block is exactly its own ridge SCM problem.
    """
    J, m, mask = _stack(problems)
    A_p, b_p = _pool_rows(problems, m)
    wp = np.sqrt(nu / scale_pool)
    blocks = _sep_blocks(problems, (1 - nu) / scale_sep)
    mu = (1 - nu) * lam / (J * scale_sep)
    start = None
    if x0 is not None:
        start = np.zeros((J, m))
        for j, w in enumerate(x0):
            start[j, : len(w)] = w
    X = SimplexLSQ(A_p * wp, b_p * wp, mask, mu=mu, blocks=blocks).solve(x0=start, tol=tol, max_iter=max_iter).x
    return [X[j, : p.donors.shape[1]].copy() for j, p in enumerate(problems)]


@dataclass
class ScmFit:
    weights: dict[str, dict[str, float]]
    nu: float
    lam: float
    q_sep: float
    q_pool: float
    unit_effects: dict[tuple[str, int], float]
    att: dict[int, float]
    se: dict[int, float]
    n_units: dict[int, int] = field(default_factory=dict)
    problems: list[ScmProblem] = field(default_factory=list, repr=False)
    separate_weights: list[np.ndarray] = field(default_factory=list, repr=False)
    flagged: list[str] = field(default_factory=list)
    normalized: bool = True
    horizon: int = 0

    def weight_vectors(self) -> list[np.ndarray]:
        return [np.array([self.weights[p.unit][d] for d in p.donor_units]) for p in self.problems]

    def diagnostics(self) -> dict:
        return {
            "q_sep": self.q_sep,
            "q_pool": self.q_pool,
            "lambda": self.lam,
            "nu": self.nu,
            "normalized": self.normalized,
            "weights": self.weights,
            "flagged": self.flagged,
        }

    def to_event_study(self, level: float = 0.95, B: int = 1000, seed=0, event_times=None) -> EventStudyResult:
        ks = sorted(self.att) if event_times is None else [k for k in sorted(set(event_times)) if k in self.att]
        z = stats.norm.ppf(0.5 + level / 2)
        units = [p.unit for p in self.problems]
        psi = np.zeros((len(units), len(ks)))
        for c, k in enumerate(ks):
            present = [(i, self.unit_effects[(u, k)]) for i, u in enumerate(units) if (u, k) in self.unit_effects]
            for i, v in present:
                psi[i, c] = v - self.att[k]
        se = np.array([self.se[k] for k in ks])
        crit = z
        live = np.isfinite(se) & (se > 0)
        if live.any() and np.any(psi[:, live]):
            crit = max(multiplier_bootstrap(psi[:, live], B=B, level=level, seed=seed).critical_value, z)
        entries = []
        for c, k in enumerate(ks):
            est, s = self.att[k], se[c]
            entries.append(EventStudyEntry(k, est, s, est - z * s, est + z * s, est - crit * s, est + crit * s,
                                           self.n_units.get(k, 0)))
        return EventStudyResult(entries, "ascm", self.horizon, level, crit, list(self.flagged), psi)

    def table(self, level: float = 0.95):
        """Rows in the layout ``event_time, estimate, se, ci_upper, ci_lower``."""
        import pandas as pd

        z = stats.norm.ppf(0.5 + level / 2)
        rows = [[k, self.att[k], self.se[k], self.att[k] + z * self.se[k], self.att[k] - z * self.se[k]]
                for k in sorted(self.att)]
        return pd.DataFrame(rows, columns=SCM_COLUMNS)


def donor_pool(dataset: PanelDataset, treat_period: int, max_event: int) -> np.ndarray:
    """Never-treated units plus units first treated after ``treat_period + max_event``."""
    c = dataset.cohort
    return (c == NEVER) | (c > treat_period + max_event)


def build_problems(dataset: PanelDataset, lam: float = 0.0, max_event: int = DEFAULT_MAX_EVENT,
                   n_lags: int | None = None) -> list[ScmProblem]:
    problems = []
    for j in np.flatnonzero(dataset.cohort != NEVER):
        Tj = int(dataset.cohort[j])
        pool = donor_pool(dataset, Tj, max_event)
        pool[j] = False
        if not pool.any():
            raise ValueError(f"unit {dataset.units[j]} has an empty donor pool")
        L = Tj - 1 if n_lags is None else min(n_lags, Tj - 1)
        lag_periods = [Tj - ell for ell in range(1, L + 1)]
        cols = [p - 1 for p in lag_periods]
        problems.append(
            ScmProblem(
                unit=dataset.units[j],
                treat_period=Tj,
                y=dataset.outcome[j, cols],
                donors=dataset.outcome[np.ix_(pool, cols)].T,
                donor_units=[u for u, m in zip(dataset.units, pool) if m],
                lam=lam,
            )
        )
    return problems


def fit_partially_pooled(
    dataset: PanelDataset,
    nu: float = 0.5,
    lam: float = 0.0,
    max_event: int = DEFAULT_MAX_EVENT,
    n_lags: int | None = None,
    tol: float = 1e-7,
) -> ScmFit:
    """Partially pooled synthetic control across all treated units.

    Both fit measures are normalised by their values at the separate (``nu = 0``)
    solution; if either is zero the unnormalised objective is used.
    """
    if not 0 <= nu <= 1:
        raise ValueError("nu must lie in [0, 1]")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    problems = build_problems(dataset, lam, max_event, n_lags)
    if not problems:
        raise ValueError("panel has no treated units")
    sep = [scm_weights(p, tol=min(tol, 1e-8)) for p in problems]
    q_sep0, q_pool0 = fit_quality(problems, sep)
    ridge0 = sum(float(w @ w) for w in sep) / len(problems)
    scale_sep = q_sep0**2 + lam * ridge0
    scale_pool = q_pool0**2
    normalized = True
    # solver noise leaves ~1e-13 imbalance on an exact fit, so compare to the outcome scale
    tiny = 1e-16 * (1.0 + max(float(np.mean(p.y**2)) for p in problems))
    if scale_sep <= tiny or scale_pool <= tiny:
        warnings.warn("separate fit is perfect; using the unnormalised pooled objective", RuntimeWarning)
        scale_sep = scale_pool = 1.0
        normalized = False
    flagged = [] if normalized else ["unnormalised objective: perfect separate fit"]
    if nu == 0:
        weights = sep
    else:
        weights = solve_pooled(problems, nu, lam, scale_sep, scale_pool, tol=tol, x0=sep)
    q_sep, q_pool = fit_quality(problems, weights)

    T = dataset.n_periods
    index = {u: i for i, u in enumerate(dataset.units)}
    effects: dict[tuple[str, int], float] = {}
    by_k: dict[int, list[float]] = {}
    for p, w in zip(problems, weights):
        j = index[p.unit]
        donors = [index[d] for d in p.donor_units]
        for k in range(1 - p.treat_period, max_event + 1):
            t = p.treat_period + k
            if t > T:
                break
            active = [d for d, wd in zip(donors, w) if wd > 0]
            bad = [dataset.units[d] for d in active if dataset.cohort[d] != NEVER and dataset.cohort[d] <= t]
            if bad:
                raise DonorContamination(f"donor {bad[0]} of unit {p.unit} is treated by period {t}")
            imputed = impute_counterfactual(w, dataset.outcome[donors, t - 1])
            tau = unit_effect(dataset.outcome[j, t - 1], imputed)
            effects[(p.unit, k)] = tau
            by_k.setdefault(k, []).append(tau)
    att = {k: att_k(v) for k, v in sorted(by_k.items())}
    se = {k: jackknife_se(v) for k, v in sorted(by_k.items())}
    for k, v in by_k.items():
        if len(v) < 2:
            flagged.append(f"event time {k}: single treated unit, SE absent")
    return ScmFit(
        weights={p.unit: dict(zip(p.donor_units, map(float, w))) for p, w in zip(problems, weights)},
        nu=nu,
        lam=lam,
        q_sep=q_sep,
        q_pool=q_pool,
        unit_effects=effects,
        att=att,
        se=se,
        n_units={k: len(v) for k, v in by_k.items()},
        problems=problems,
        separate_weights=sep,
        flagged=flagged,
        normalized=normalized,
        horizon=T,
    )


def gcv_lambda_grid(dataset: PanelDataset) -> list[float]:
    """Candidate ridge penalties scaled by the mean pre-treatment lag variance."""
    pre = [dataset.outcome[j, : int(g) - 1] for j, g in enumerate(dataset.cohort) if g != NEVER]
    scale = float(np.mean([np.var(x) for x in pre if len(x) > 1])) if pre else 1.0
    return [0.0] + [c * scale for c in (1e-3, 1e-2, 1e-1, 1.0, 10.0)]


def select_lambda(dataset: PanelDataset, grid=None, holdout: int = 2, max_event: int = DEFAULT_MAX_EVENT) -> float:
    """Pick the ridge penalty with the smallest out-of-sample lag imbalance.

    Each unit's weights are fit on its lags older than ``holdout`` and scored
    on the ``holdout`` most recent lags. Units with too few lags are skipped.
    Ties resolve to the smaller penalty.
    """
    grid = gcv_lambda_grid(dataset) if grid is None else sorted(grid)
    problems = [p for p in build_problems(dataset, 0.0, max_event) if p.n_lags > holdout]
    if not problems:
        return 0.0
    scores = []
    for lam in grid:
        err = 0.0
        for p in problems:
            fit = ScmProblem(p.unit, p.treat_period, p.y[holdout:], p.donors[holdout:], p.donor_units, lam)
            w = scm_weights(fit)
            r = p.y[:holdout] - p.donors[:holdout] @ w
            err += float(r @ r)
        scores.append(err / len(problems))
    best = int(np.argmin(scores))
    log.info("select_lambda: scores %s -> %g", scores, grid[best])
    return float(grid[best])
