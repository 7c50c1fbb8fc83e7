"""Group-time ATT estimation with doubly-robust, outcome-regression and IPW estimators.

Every cell estimate carries its influence function stacked to the full set of
panel units, scaled so that ``se = sqrt(mean(psi**2) / N)``. Cells can then be
aggregated linearly and bootstrapped jointly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .glm import SeparationError, logit_fit, wls_fit
from .panel import NEVER, PanelDataset

log = logging.getLogger(__name__)

NEVER_TREATED = "never"
NOT_YET_TREATED = "notyet"
CONTROL_GROUPS = (NEVER_TREATED, NOT_YET_TREATED)
METHODS = ("dr", "or", "ipw")
BASE_PERIODS = ("varying", "universal")

PSCORE_BOUNDS = (0.001, 0.999)


class OverlapError(ValueError):
    """Estimated propensity scores leave the admissible range; overlap fails."""


class CellError(ValueError):
    """A (g, t) cell cannot be estimated."""


@dataclass
class GroupTimeATT:
    g: int
    t: int
    estimate: float
    influence: np.ndarray
    se: float
    n_treated: int
    n_control: int
    control_group: str = NEVER_TREATED
    method: str = "dr"
    delta: int = 0
    base: int | None = None
    error: str | None = None

    @property
    def e(self) -> int:
        return self.t - self.g

    @property
    def ok(self) -> bool:
        return self.error is None

    def row(self) -> dict:
        return {
            "g": self.g,
            "t": self.t,
            "estimate": self.estimate,
            "se": self.se,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
        }


def _check_options(control_group, method, base_period):
    if control_group not in CONTROL_GROUPS:
        raise ValueError(f"control_group must be one of {CONTROL_GROUPS}, got {control_group!r}")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if base_period not in BASE_PERIODS:
        raise ValueError(f"base_period must be one of {BASE_PERIODS}, got {base_period!r}")


def base_period_for(g: int, t: int, delta: int = 0, base_period: str = "varying") -> int:
    """Comparison period for cell ``(g, t)``.

    Post cells (``t > g - delta - 1``) compare against ``g - delta - 1``.
    Earlier cells compare against ``t - 1`` (varying) or ``g - delta - 1``
    (universal).
    """
    ref = g - delta - 1
    if ref < 1:
        raise CellError(f"cohort {g} with anticipation {delta} has no reference period")
    if t == ref:
        raise CellError(f"t={t} is the reference period of cohort {g}")
    if t > ref or base_period == "universal":
        return ref
    if t - 1 < 1:
        raise CellError(f"pre-period cell t={t} has no preceding period")
    return t - 1


def control_mask(dataset: PanelDataset, g: int, t: int, control_group: str, delta: int = 0) -> np.ndarray:
    never = dataset.cohort == NEVER
    if control_group == NEVER_TREATED:
        return never
    return never | (dataset.cohort > max(t, g) + delta)


def _dr_cell(dy, D, X_ps, X_or, method):
    """Estimate and within-cell influence function for one 2x2 comparison.

    ``X_ps`` and ``X_or`` include the intercept. Follows the panel doubly-robust
    DiD score with estimation-effect corrections for both nuisance models.
    """
    n = len(dy)
    if method == "or":
        ps = np.full(n, D.mean())
        X_ps = np.ones((n, 1))
    else:
        try:
            ps_fit = logit_fit(X_ps, D)
        except SeparationError as exc:
            raise OverlapError(str(exc)) from exc
        ps = ps_fit.fitted
    if ps.min() < PSCORE_BOUNDS[0] or ps.max() > PSCORE_BOUNDS[1]:
        raise OverlapError(
            f"propensity scores in [{ps.min():.4g}, {ps.max():.4g}] leave "
            f"[{PSCORE_BOUNDS[0]}, {PSCORE_BOUNDS[1]}]; overlap condition violated"
        )

    ctrl = D == 0
    if method == "ipw":
        m = np.zeros(n)
        X_or = X_or[:, :0]
    else:
        fit = wls_fit(X_or[ctrl], dy[ctrl])
        keep = fit.kept
        X_or = X_or[:, keep]
        m = X_or @ fit.coefficients[keep]

    w_treat = D
    w_cont = ps * (1 - D) / (1 - ps)
    resid = dy - m
    att_treat = w_treat * resid
    att_cont = w_cont * resid
    eta_treat = att_treat.mean() / w_treat.mean()
    eta_cont = att_cont.mean() / w_cont.mean()
    att = eta_treat - eta_cont

    # outcome-regression estimation effect
    if X_or.shape[1]:
        wols = (1 - D)
        XpX = (X_or * wols[:, None]).T @ X_or / n
        lin_ols = (X_or * (wols * resid)[:, None]) @ linalg.pinv(XpX)
        M1 = (X_or * w_treat[:, None]).mean(axis=0)
        M3 = (X_or * w_cont[:, None]).mean(axis=0)
        treat_ols = lin_ols @ M1
        cont_ols = lin_ols @ M3
    else:
        treat_ols = cont_ols = 0.0

    # propensity estimation effect
    W = ps * (1 - ps)
    hess = linalg.pinv((X_ps * W[:, None]).T @ X_ps / n)
    lin_ps = (X_ps * (D - ps)[:, None]) @ hess
    M2 = (X_ps * (w_cont * (resid - eta_cont))[:, None]).mean(axis=0)

    inf_treat = (att_treat - w_treat * eta_treat - treat_ols) / w_treat.mean()
    inf_cont = (att_cont - w_cont * eta_cont + lin_ps @ M2 - cont_ols) / w_cont.mean()
    psi = inf_treat - inf_cont
    return float(att), psi - psi.mean()


def group_time_att(
    dataset: PanelDataset,
    g: int,
    t: int,
    control_group: str = NEVER_TREATED,
    covariates: Sequence[str] = (),
    method: str = "dr",
    delta: int = 0,
    base_period: str = "varying",
) -> GroupTimeATT:
    """ATT(g, t) of cohort ``g`` at period ``t``.

    Covariates are evaluated at the reference period ``g - delta - 1``. With no
    covariates the three methods coincide with the difference in mean outcome
    changes between cohort ``g`` and the control pool.
    """
    _check_options(control_group, method, base_period)
    T = dataset.n_periods
    if not 1 <= t <= T:
        raise CellError(f"period {t} outside 1..{T}")
    base = base_period_for(g, t, delta, base_period)
    treated = dataset.cohort == g
    if not treated.any():
        raise CellError(f"cohort {g} has no units")
    controls = control_mask(dataset, g, t, control_group, delta)
    if not controls.any():
        raise CellError(f"empty {control_group} control pool for cell (g={g}, t={t})")

    cell = treated | controls
    idx = np.flatnonzero(cell)
    dy = dataset.y(t)[idx] - dataset.y(base)[idx]
    D = treated[idx].astype(float)
    X = dataset.covariates_at(list(covariates), g - delta - 1)[idx]
    X = np.column_stack([np.ones(len(idx)), X])
    att, psi = _dr_cell(dy, D, X, X, method)

    N, n = dataset.n_units, len(idx)
    influence = np.zeros(N)
    influence[idx] = psi * N / n
    se = float(np.sqrt(np.mean(influence**2) / N))
    return GroupTimeATT(
        g=int(g),
        t=int(t),
        estimate=att,
        influence=influence,
        se=se,
        n_treated=int(treated.sum()),
        n_control=int(controls.sum()),
        control_group=control_group,
        method=method,
        delta=int(delta),
        base=int(base),
    )


def admissible_periods(g: int, T: int, delta: int = 0, base_period: str = "varying") -> list[int]:
    ref = g - delta - 1
    if ref < 1:
        return []
    first = 2 if base_period == "varying" else 1
    return [t for t in range(first, T + 1) if t != ref]


def att_surface(
    dataset: PanelDataset,
    control_group: str = NEVER_TREATED,
    covariates: Sequence[str] = (),
    method: str = "dr",
    delta: int = 0,
    base_period: str = "varying",
) -> list[GroupTimeATT]:
    """All admissible ATT(g, t) cells; failing cells are kept with ``error`` set."""
    _check_options(control_group, method, base_period)
    cohorts = dataset.treated_cohorts()
    if not cohorts:
        raise ValueError("panel has no treated cohort")
    N = dataset.n_units
    out = []
    for g in cohorts:
        for t in admissible_periods(g, dataset.n_periods, delta, base_period):
            try:
                out.append(group_time_att(dataset, g, t, control_group, covariates, method, delta, base_period))
            except (CellError, OverlapError, ValueError, linalg.LinAlgError) as exc:
                log.info("cell (g=%d, t=%d) failed: %s", g, t, exc)
                out.append(
                    GroupTimeATT(
                        g=g, t=t, estimate=np.nan, influence=np.zeros(N), se=np.nan,
                        n_treated=int((dataset.cohort == g).sum()),
                        n_control=int(control_mask(dataset, g, t, control_group, delta).sum()),
                        control_group=control_group, method=method, delta=delta, error=str(exc),
                    )
                )
    return out


@dataclass
class BootstrapBand:
    critical_value: float
    se: np.ndarray
    half_width: np.ndarray
    level: float
    B: int
    seed: int
    draws: np.ndarray = field(repr=False, default=None)


def rademacher(B: int, n: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(B, n), dtype=np.int8) * 2 - 1


def multiplier_bootstrap(influence, B: int = 1000, level: float = 0.95, seed=0, se=None) -> BootstrapBand:
    """Sup-t simultaneous band from Rademacher-multiplied influence functions.

    Parameters
    ----------
    influence : array (n_units, K), a list of :class:`GroupTimeATT`, or an
        object with an ``influence`` attribute of that shape.
    se : optional pointwise standard errors to scale the band; defaults to
        ``sqrt(sum(psi**2)) / n`` per column.

    The critical value is the ``level`` quantile over draws of
    ``max_k |n^-1 sum_i v_i psi_ik| / se_k``.
    """
    psi = _influence_matrix(influence)
    if B < 200:
        raise ValueError("multiplier bootstrap needs B >= 200")
    n, K = psi.shape
    if not np.any(psi):
        raise ValueError("influence functions are identically zero")
    sd = np.sqrt(np.sum(psi**2, axis=0)) / n
    live = sd > 0
    V = rademacher(B, n, seed)
    boot = (V @ psi[:, live]) / n
    tmax = np.max(np.abs(boot) / sd[live], axis=1)
    crit = float(np.quantile(tmax, level))
    scale = sd if se is None else np.asarray(se, dtype=float)
    return BootstrapBand(crit, sd, crit * scale, level, B, seed, tmax)


def _influence_matrix(obj) -> np.ndarray:
    if isinstance(obj, np.ndarray):
        return obj[:, None] if obj.ndim == 1 else obj
    if hasattr(obj, "influence") and obj.influence is not None and not isinstance(obj, GroupTimeATT):
        return np.asarray(obj.influence)
    cells = [c for c in obj if c.ok]
    return np.column_stack([c.influence for c in cells])


def pointwise_ci(estimate, se, level=0.95):
    z = stats.norm.ppf(0.5 + level / 2)
    return estimate - z * se, estimate + z * se
