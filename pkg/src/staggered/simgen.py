"""Simulated staggered-adoption panels with exactly known treatment effects."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import special

from .panel import NEVER, PanelDataset, cohort_sizes

# 59 units over 37 weekly periods; nine cohorts two weeks apart, 19 never treated
DEFAULT_COHORTS = {8: 4, 10: 5, 12: 4, 14: 5, 16: 4, 18: 5, 20: 4, 22: 5, 24: 4}


@dataclass
class SimSpec:
    n_units: int = 59
    n_periods: int = 37
    adoption: str = "explicit"  # "explicit" | "logistic"
    cohorts: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_COHORTS))
    adoption_periods: list[int] | None = None
    never_fraction: float = 0.3
    adoption_loadings: list[float] = field(default_factory=list)
    effect: str = "constant"  # "constant" | "linear" | "table"
    effect_value: float = 1.0
    effect_slope: float = 0.0
    effect_table: dict[str, float] = field(default_factory=dict)
    error: str = "ar1"  # "iid" | "ar1"
    sigma: float = 0.5
    rho: float = 0.5
    n_covariates: int = 0
    covariate_dist: str = "normal"  # "normal" | "bernoulli"
    outcome_loadings: list[float] = field(default_factory=list)
    trend_loadings: list[float] = field(default_factory=list)
    unit_sd: float = 1.0
    time_sd: float = 0.5
    count: bool = False
    dispersion: float = 0.0
    base_log_rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.cohorts = {int(g): int(n) for g, n in self.cohorts.items()}
        if self.error not in ("iid", "ar1"):
            raise ValueError(f"unknown error model {self.error!r}")
        if not -1 < self.rho < 1:
            raise ValueError("AR(1) coefficient must lie in (-1, 1)")
        if self.sigma < 0 or self.dispersion < 0:
            raise ValueError("sigma and dispersion must be non-negative")
        if self.adoption not in ("explicit", "logistic"):
            raise ValueError(f"unknown adoption scheme {self.adoption!r}")
        if self.adoption == "explicit":
            bad = [g for g in self.cohorts if not 2 <= g <= self.n_periods]
            if bad:
                raise ValueError(f"cohort periods {bad} outside 2..{self.n_periods}")
            if sum(self.cohorts.values()) > self.n_units:
                raise ValueError("cohort sizes exceed the number of units")
        for name in ("outcome_loadings", "trend_loadings", "adoption_loadings"):
            v = getattr(self, name)
            if v and len(v) != self.n_covariates:
                raise ValueError(f"{name} needs {self.n_covariates} entries")

    def periods(self) -> list[int]:
        if self.adoption == "explicit":
            return sorted(self.cohorts)
        return sorted(self.adoption_periods or sorted(DEFAULT_COHORTS))

    def tau(self, g: int, k: int) -> float:
        """Effect ``k`` periods after adoption for cohort ``g``; zero before adoption."""
        if k < 0:
            return 0.0
        if self.effect == "constant":
            return self.effect_value
        if self.effect == "linear":
            return self.effect_value + self.effect_slope * k
        if self.effect == "table":
            key = f"{g}:{k}"
            if key not in self.effect_table:
                raise KeyError(f"effect table missing entry for cohort {g}, event time {k}")
            return float(self.effect_table[key])
        raise ValueError(f"unknown effect kind {self.effect!r}")

    def to_json(self, path=None) -> str:
        d = asdict(self)
        d["cohorts"] = {str(g): n for g, n in self.cohorts.items()}
        s = json.dumps(d, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(s)
        return s

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown SimSpec keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SimTruth:
    att_gt: dict[tuple[int, int], float]
    theta_es: dict[int, float]
    y_untreated: np.ndarray
    y_treated: np.ndarray
    scale: str = "outcome"

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "att_gt": [{"g": g, "t": t, "att": v} for (g, t), v in sorted(self.att_gt.items())],
            "theta_es": {str(e): v for e, v in sorted(self.theta_es.items())},
        }


def selection_on_covariates(spec: SimSpec, X: np.ndarray, rng) -> np.ndarray:
    """Multinomial-logit cohort draw with log-odds ``a + x'b`` for every adoption period.

    ``a`` puts probability ``never_fraction`` on NEVER at ``x = 0``.
    """
    f = spec.never_fraction
    if not 0 < f < 1:
        raise ValueError("never_fraction must lie strictly between 0 and 1; estimators need a control pool")
    periods = spec.periods()
    K = len(periods)
    a = np.log((1 - f) / (f * K))
    b = np.asarray(spec.adoption_loadings or np.zeros(X.shape[1]), dtype=float)
    lin = a + X @ b if X.shape[1] else np.full(len(X), a)
    logits = np.column_stack([np.zeros(len(X))] + [lin] * K)
    probs = special.softmax(logits, axis=1)
    u = rng.random(len(X))
    pick = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    labels = np.array([NEVER] + periods)
    return labels[np.minimum(pick, K)]


def _covariates(spec, rng):
    n, p = spec.n_units, spec.n_covariates
    if p == 0:
        return np.zeros((n, 0))
    if spec.covariate_dist == "normal":
        return rng.standard_normal((n, p))
    if spec.covariate_dist == "bernoulli":
        return (rng.random((n, p)) < 0.5).astype(float)
    raise ValueError(f"unknown covariate distribution {spec.covariate_dist!r}")


def _errors(spec, rng):
    n, T = spec.n_units, spec.n_periods
    z = rng.standard_normal((n, T))
    if spec.error == "iid":
        return spec.sigma * z
    e = np.empty((n, T))
    e[:, 0] = spec.sigma * z[:, 0]
    innov = spec.sigma * np.sqrt(1 - spec.rho**2)
    for t in range(1, T):
        e[:, t] = spec.rho * e[:, t - 1] + innov * z[:, t]
    return e


def implied_theta_es(spec: SimSpec, cohort: np.ndarray) -> dict[int, float]:
    sizes = {int(g): int(c) for g, c in zip(*np.unique(cohort[cohort != NEVER], return_counts=True))}
    T = spec.n_periods
    out = {}
    if not sizes:
        return out
    for e in range(1 - max(sizes), T - min(sizes) + 1):
        elig = {g: n for g, n in sizes.items() if 1 <= g + e <= T}
        if elig:
            tot = sum(elig.values())
            out[e] = sum(n / tot * spec.tau(g, e) for g, n in elig.items())
    return out


def generate(spec: SimSpec) -> tuple[PanelDataset, SimTruth]:
    """Draw one panel and its exact treatment-effect surface.

    Untreated outcomes are unit effect + period effect + covariate level and
    trend terms + AR(1)/iid error. Treated outcomes add ``tau(g, t - g)`` from
    adoption on. With ``count=True`` the outcome is a negative-binomial count
    with log mean ``base_log_rate + log(exposure) + latent`` and the truth
    refers to the latent log-rate scale.
    """
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n_units, spec.n_periods
    X = _covariates(spec, rng)
    if spec.adoption == "explicit":
        cohort = np.full(n, NEVER, dtype=int)
        pos = 0
        for g in sorted(spec.cohorts):
            cohort[pos: pos + spec.cohorts[g]] = g
            pos += spec.cohorts[g]
        cohort = cohort[rng.permutation(n)]
    else:
        cohort = selection_on_covariates(spec, X, rng)

    alpha = spec.unit_sd * rng.standard_normal(n)
    lam = spec.time_sd * rng.standard_normal(T)
    t_grid = np.arange(1, T + 1)
    y0 = alpha[:, None] + lam[None, :] + _errors(spec, rng)
    if spec.n_covariates:
        if spec.outcome_loadings:
            y0 += (X @ np.asarray(spec.outcome_loadings))[:, None]
        if spec.trend_loadings:
            y0 += (X @ np.asarray(spec.trend_loadings))[:, None] * (t_grid[None, :] / T)

    effect = np.zeros((n, T))
    for j in np.flatnonzero(cohort != NEVER):
        g = int(cohort[j])
        for t in range(g, T + 1):
            effect[j, t - 1] = spec.tau(g, t - g)
    y1 = y0 + effect

    exposure = None
    outcome = y1
    scale = "outcome"
    if spec.count:
        exposure = np.exp(rng.uniform(0.0, 2.0, n))
        mean = np.exp(spec.base_log_rate + np.log(exposure)[:, None] + y1)
        if spec.dispersion > 0:
            shape = 1.0 / spec.dispersion
            mean = mean * rng.gamma(shape, 1.0 / shape, size=mean.shape)
        outcome = rng.poisson(mean).astype(float)
        scale = "log rate"

    att_gt = {}
    for g in sorted(set(cohort[cohort != NEVER].tolist())):
        for t in range(1, T + 1):
            att_gt[(g, t)] = spec.tau(g, t - g)
    truth = SimTruth(att_gt, implied_theta_es(spec, cohort), y0, y1, scale)

    names = [f"x{k + 1}" for k in range(spec.n_covariates)]
    width = len(str(n))
    data = PanelDataset(
        units=[f"u{j + 1:0{width}d}" for j in range(n)],
        times=t_grid,
        outcome=outcome,
        cohort=cohort,
        covariates_static=X,
        static_names=names,
        exposure=exposure,
    )
    return data, truth


def default_spec(**overrides) -> SimSpec:
    return SimSpec(**overrides)
