"""Monte Carlo bias and coverage of the event-study estimators on simulated panels."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .aggregate import DEFAULT_WINDOW, EventStudyResult, aggregate
from .ascm import fit_partially_pooled, select_lambda
from .drdid import att_surface
from .iwes import iwes_aggregate, iwes_fit
from .nbes import nb_event_study
from .panel import PanelDataset, cohort_sizes
from .simgen import SimSpec, generate

log = logging.getLogger(__name__)

METHODS = ("nb", "drdid", "iwes", "ascm")
TABLE_COLUMNS = ["event_time", "truth", "mean", "bias", "mc_se", "rmse", "coverage", "sim_coverage", "reps"]


@dataclass
class EstimatorOptions:
    control_group: str = "never"
    delta: int = 0
    base_period: str = "varying"
    covariates: Sequence[str] = ()
    lam: float | str = 0.0
    nu: float = 0.5
    max_event: int = 12
    level: float = 0.95
    bootstrap_B: int = 1000
    window: tuple[int, int] = DEFAULT_WINDOW


def estimate(dataset: PanelDataset, method: str, opts: EstimatorOptions, seed=0) -> tuple[EventStudyResult, dict]:
    """Run one estimator; returns the event-study result and a diagnostics dict."""
    lo, hi = opts.window
    window = list(range(lo, hi + 1))
    diag: dict = {
        "method": method,
        "n_units": dataset.n_units,
        "n_periods": dataset.n_periods,
        "cohort_sizes": {str(g): n for g, n in cohort_sizes(dataset).items()},
        "n_never_treated": int(dataset.never_treated.sum()),
    }
    if method == "drdid":
        cells = att_surface(dataset, opts.control_group, opts.covariates, "dr", opts.delta, opts.base_period)
        res = aggregate(
            cells, cohort_sizes(dataset), event_times=window, level=opts.level, B=opts.bootstrap_B,
            seed=seed, method="drdid", horizon=dataset.n_periods,
        )
        diag["cells_estimated"] = sum(c.ok for c in cells)
        diag["cells_failed"] = [{"g": c.g, "t": c.t, "error": c.error} for c in cells if not c.ok]
        diag["control_group"] = opts.control_group
        diag["base_period"] = opts.base_period
    elif method == "iwes":
        fit = iwes_fit(dataset, opts.covariates)
        res = iwes_aggregate(fit, event_times=window, level=opts.level, B=opts.bootstrap_B, seed=seed)
        diag["coefficients"] = len(fit.keys)
        diag["aliased_cells"] = [{"g": g, "e": e} for g, e in fit.aliased]
    elif method == "nb":
        res, fit = nb_event_study(dataset, opts.covariates, opts.level, opts.bootstrap_B, seed, window)
        diag["dispersion"] = fit.dispersion
        diag["converged"] = bool(fit.converged)
        diag["iterations"] = int(fit.iterations)
        diag["aliased"] = [n for n, a in zip(fit.names, fit.aliased) if a]
    elif method == "ascm":
        lam = opts.lam
        if lam == "auto":
            lam = select_lambda(dataset, max_event=opts.max_event)
        fit = fit_partially_pooled(dataset, nu=opts.nu, lam=float(lam), max_event=opts.max_event)
        res = fit.to_event_study(opts.level, opts.bootstrap_B, seed, window)
        diag.update(fit.diagnostics())
        # a data frame, not JSON; callers write it as its own CSV
        diag["scm_table"] = fit.table(opts.level)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    diag["critical_value"] = res.critical_value
    diag["flagged"] = list(res.flagged)
    if method != "ascm":
        diag["weights"] = {str(r.e): {str(g): w for g, w in r.weights.items()} for r in res.entries if r.weights}
    return res, diag


def rep_seeds(seed: int, reps: int) -> list[int]:
    """Independent per-replication seeds spawned from one master seed."""
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(c.generate_state(1, np.uint32)[0]) for c in children]


@dataclass
class RepResult:
    rep: int
    truth: dict[int, float]
    rows: dict[str, dict[int, tuple]] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)


def _one_rep(rep, seed, spec, methods, opts):
    data, truth = generate(replace(spec, seed=seed))
    out = RepResult(rep, dict(truth.theta_es))
    for m in methods:
        try:
            res, _ = estimate(data, m, opts, seed=seed)
        except Exception as exc:  # recorded per replication, summarised later
            out.errors[m] = f"{type(exc).__name__}: {exc}"
            continue
        out.rows[m] = {
            r.e: (r.estimate, r.ci_low, r.ci_high, r.sim_low, r.sim_high) for r in res.entries if not r.reference
        }
    return out


def run_benchmark(spec: SimSpec, methods: Sequence[str], reps: int, seed: int,
                  opts: EstimatorOptions | None = None, workers: int = 1) -> tuple[dict[str, pd.DataFrame], dict]:
    """Bias and coverage tables per method over ``reps`` simulated panels.

    Replication ``r`` uses a seed spawned from ``seed``, so results do not
    depend on ``workers``; tables are assembled in replication order.
    """
    opts = opts or EstimatorOptions()
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if "nb" in methods and not spec.count:
        raise ValueError("method 'nb' needs count outcomes; set count=true in the simulation spec")
    seeds = rep_seeds(seed, reps)
    args = [(r, s, spec, list(methods), opts) for r, s in enumerate(seeds)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _one_rep(*a), args))
    else:
        results = [_one_rep(*a) for a in args]

    tables = {}
    failures = {}
    for m in methods:
        failures[m] = sum(m in r.errors for r in results)
        tables[m] = summarise([r for r in results if m in r.rows], m)
    summary = {"reps": reps, "seed": seed, "failed_reps": failures,
               "errors": {m: sorted({r.errors[m] for r in results if m in r.errors}) for m in methods}}
    return tables, summary


def summarise(results: Sequence[RepResult], method: str) -> pd.DataFrame:
    by_e: dict[int, list] = {}
    for r in results:
        for e, row in r.rows[method].items():
            if e in r.truth:
                by_e.setdefault(e, []).append((r.truth[e],) + row)
    rows = []
    for e in sorted(by_e):
        a = np.array(by_e[e], dtype=float)
        truth, est, lo, hi, slo, shi = a.T
        err = est - truth
        n = len(a)
        rows.append([
            e, truth.mean(), est.mean(), err.mean(),
            err.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan,
            np.sqrt(np.mean(err**2)),
            np.mean((lo <= truth) & (truth <= hi)),
            np.mean((slo <= truth) & (truth <= shi)),
            n,
        ])
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)
