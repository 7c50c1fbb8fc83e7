"""Balanced panel container, CSV ingestion and outcome preprocessing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

NEVER = 0
WEEK_CONVENTION = "dates floored to the Monday of their ISO week; period 1 is the first week observed"


class SchemaError(ValueError):
    """A required column or configuration key is missing."""


class PanelValidationError(ValueError):
    """The data violate a panel invariant (balance, cohort range, exposure)."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced unit-by-period panel.

    ``outcome`` has shape ``(n_units, n_periods)``; period ``t`` lives in
    column ``t - 1``. ``cohort[j]`` is the first treated period of unit ``j``
    or :data:`NEVER`.
    """

    units: tuple[str, ...]
    times: np.ndarray
    outcome: np.ndarray
    cohort: np.ndarray
    covariates_static: np.ndarray = None
    static_names: tuple[str, ...] = ()
    covariates_tv: np.ndarray = None
    tv_names: tuple[str, ...] = ()
    exposure: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.units)
        object.__setattr__(self, "units", tuple(str(u) for u in self.units))
        object.__setattr__(self, "times", _frozen(self.times, int))
        object.__setattr__(self, "outcome", _frozen(self.outcome))
        object.__setattr__(self, "cohort", _frozen(self.cohort, int))
        T = len(self.times)
        xs = np.zeros((n, 0)) if self.covariates_static is None else self.covariates_static
        xtv = np.zeros((n, T, 0)) if self.covariates_tv is None else self.covariates_tv
        object.__setattr__(self, "covariates_static", _frozen(xs))
        object.__setattr__(self, "covariates_tv", _frozen(xtv))
        object.__setattr__(self, "static_names", tuple(self.static_names))
        object.__setattr__(self, "tv_names", tuple(self.tv_names))
        if self.exposure is not None:
            object.__setattr__(self, "exposure", _frozen(self.exposure))
        self._validate()

    def _validate(self):
        n, T = len(self.units), len(self.times)
        if len(set(self.units)) != n:
            raise PanelValidationError("duplicate unit identifiers")
        if T == 0 or n == 0:
            raise PanelValidationError("empty panel")
        if not np.array_equal(self.times, np.arange(1, T + 1)):
            raise PanelValidationError("time index must be 1..T with no gaps")
        if self.outcome.shape != (n, T):
            raise PanelValidationError(f"outcome shape {self.outcome.shape} != {(n, T)}")
        missing = np.argwhere(~np.isfinite(self.outcome))
        if len(missing):
            cells = ", ".join(f"({self.units[i]}, {t + 1})" for i, t in missing[:10])
            raise PanelValidationError(f"unbalanced panel; missing cells: {cells}")
        bad = (self.cohort != NEVER) & ((self.cohort < 2) | (self.cohort > T))
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise PanelValidationError(
                f"unit {self.units[j]} has cohort {self.cohort[j]}; cohorts must be NEVER or in 2..{T}"
            )
        if self.covariates_static.shape != (n, len(self.static_names)):
            raise PanelValidationError("static covariate matrix does not match its names")
        if self.covariates_tv.shape != (n, T, len(self.tv_names)):
            raise PanelValidationError("time-varying covariate array does not match its names")
        if self.exposure is not None:
            if self.exposure.shape != (n,) or not np.all(self.exposure > 0):
                raise PanelValidationError("exposure must be strictly positive, one value per unit")

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.times)

    @property
    def never_treated(self) -> np.ndarray:
        return self.cohort == NEVER

    def treated_cohorts(self) -> list[int]:
        return sorted(int(g) for g in np.unique(self.cohort) if g != NEVER)

    def y(self, t: int) -> np.ndarray:
        """Outcome column for period ``t`` (1-based)."""
        return self.outcome[:, t - 1]

    def static_matrix(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.static_names.index(c) for c in names]
        return self.covariates_static[:, idx]

    def tv_matrix(self, names: Sequence[str], t: int) -> np.ndarray:
        idx = [self.tv_names.index(c) for c in names]
        return self.covariates_tv[:, t - 1, idx]

    def covariates_at(self, names: Sequence[str], t: int) -> np.ndarray:
        """Unit-level covariate matrix, time-varying ones evaluated at period ``t``."""
        cols = []
        for c in names:
            if c in self.static_names:
                cols.append(self.covariates_static[:, self.static_names.index(c)])
            elif c in self.tv_names:
                cols.append(self.covariates_tv[:, t - 1, self.tv_names.index(c)])
            else:
                raise SchemaError(f"unknown covariate {c!r}")
        return np.column_stack(cols) if cols else np.zeros((self.n_units, 0))

    def replace(self, **changes) -> "PanelDataset":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return PanelDataset(**kw)

    def subset(self, mask) -> "PanelDataset":
        mask = np.asarray(mask, bool)
        return self.replace(
            units=[u for u, m in zip(self.units, mask) if m],
            outcome=self.outcome[mask],
            cohort=self.cohort[mask],
            covariates_static=self.covariates_static[mask],
            covariates_tv=self.covariates_tv[mask],
            exposure=None if self.exposure is None else self.exposure[mask],
        )

    def __eq__(self, other):
        if not isinstance(other, PanelDataset):
            return NotImplemented
        same_exposure = (self.exposure is None and other.exposure is None) or (
            self.exposure is not None
            and other.exposure is not None
            and np.array_equal(self.exposure, other.exposure)
        )
        return (
            self.units == other.units
            and self.static_names == other.static_names
            and self.tv_names == other.tv_names
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.outcome, other.outcome)
            and np.array_equal(self.cohort, other.cohort)
            and np.array_equal(self.covariates_static, other.covariates_static)
            and np.array_equal(self.covariates_tv, other.covariates_tv)
            and same_exposure
        )

    __hash__ = None

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame in the canonical column layout used by :func:`save_panel`."""
        n, T = self.outcome.shape
        df = pd.DataFrame(
            {
                "unit": np.repeat(self.units, T),
                "time": np.tile(self.times, n),
                "outcome": self.outcome.ravel(),
                "cohort": np.repeat(self.cohort, T),
            }
        )
        if self.exposure is not None:
            df["exposure"] = np.repeat(self.exposure, T)
        for k, c in enumerate(self.static_names):
            df[c] = np.repeat(self.covariates_static[:, k], T)
        for k, c in enumerate(self.tv_names):
            df[c] = self.covariates_tv[:, :, k].ravel()
        return df

    def canonical_schema(self) -> dict:
        schema = {
            "unit": "unit",
            "time": "time",
            "outcome": "outcome",
            "cohort": "cohort",
            "covariates_static": list(self.static_names),
            "covariates_tv": list(self.tv_names),
        }
        if self.exposure is not None:
            schema["exposure"] = "exposure"
        return schema


@dataclass
class CleaningReport:
    """Record of cells repaired by :func:`repair_negative_increments`."""

    cells_interpolated: int = 0
    cells_clamped: int = 0
    interpolated: dict[str, list[int]] = field(default_factory=dict)
    clamped: dict[str, list[int]] = field(default_factory=dict)
    week_convention: str = WEEK_CONVENTION

    def merge(self, name: str, other: "CleaningReport") -> None:
        if other.interpolated.get("series"):
            self.interpolated[name] = other.interpolated["series"]
        if other.clamped.get("series"):
            self.clamped[name] = other.clamped["series"]
        self.cells_interpolated += other.cells_interpolated
        self.cells_clamped += other.cells_clamped

    def to_dict(self) -> dict:
        return {
            "cells_interpolated": self.cells_interpolated,
            "cells_clamped": self.cells_clamped,
            "interpolated": self.interpolated,
            "clamped": self.clamped,
            "week_convention": self.week_convention,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def repair_negative_increments(series) -> tuple[np.ndarray, CleaningReport]:
    """Replace negative new-count entries by a natural cubic spline through the rest.

    The spline is fit on the non-negative entries (indexed 1..n) and evaluated
    at each negative position; results below zero are clamped to zero.
    Repaired positions in the report are 1-based.
    """
    y = np.asarray(series, dtype=float)
    if len(y) < 4:
        raise ValueError("series needs at least 4 entries for spline repair")
    neg = y < 0
    report = CleaningReport()
    if not neg.any():
        return y.copy(), report
    x = np.arange(1, len(y) + 1, dtype=float)
    if (~neg).sum() < 4:
        raise ValueError(
            f"only {(~neg).sum()} non-negative entries; natural cubic spline needs at least 4"
        )
    spline = CubicSpline(x[~neg], y[~neg], bc_type="natural", extrapolate=True)
    out = y.copy()
    fill = spline(x[neg])
    clamp = fill < 0
    out[neg] = np.where(clamp, 0.0, fill)
    report.interpolated["series"] = [int(i) for i in x[neg]]
    report.clamped["series"] = [int(i) for i in x[neg][clamp]]
    report.cells_interpolated = int(neg.sum())
    report.cells_clamped = int(clamp.sum())
    return out, report


def repair_panel(dataset: PanelDataset) -> tuple[PanelDataset, CleaningReport]:
    """Apply :func:`repair_negative_increments` to every unit's outcome series."""
    report = CleaningReport()
    out = np.array(dataset.outcome)
    for j, u in enumerate(dataset.units):
        if (out[j] < 0).any():
            out[j], r = repair_negative_increments(out[j])
            report.merge(u, r)
    return dataset.replace(outcome=out), report


def asinh_outcome(count):
    """Inverse hyperbolic sine ``ln(c + sqrt(c^2 + 1))`` of a non-negative count."""
    c = np.asarray(count, dtype=float)
    if np.any(c < 0):
        raise ValueError("asinh_outcome expects non-negative counts; repair negatives first")
    out = np.arcsinh(c)
    return float(out) if out.ndim == 0 else out


def event_time(t: int, g: int) -> int:
    if g == NEVER:
        raise ValueError("event time undefined for never-treated units")
    return int(t) - int(g)


def cohort_shares(dataset: PanelDataset, e: int, T: int | None = None) -> dict[int, float]:
    """Share of each treated cohort among cohorts observed at event time ``e``.

    A cohort ``g`` is eligible when ``g + e`` is inside the panel (``1 <= g + e <= T``);
    shares are proportional to cohort sizes.
    """
    T = dataset.n_periods if T is None else T
    sizes = cohort_sizes(dataset)
    eligible = {g: n for g, n in sizes.items() if 1 <= g + e <= T}
    if not eligible:
        raise ValueError(f"no cohort observed at event time {e} (horizon T={T})")
    total = sum(eligible.values())
    return {g: n / total for g, n in eligible.items()}


def cohort_sizes(dataset: PanelDataset) -> dict[int, int]:
    gs, counts = np.unique(dataset.cohort[dataset.cohort != NEVER], return_counts=True)
    return {int(g): int(c) for g, c in zip(gs, counts)}


# --------------------------------------------------------------------------- I/O


def _week_start(s: pd.Series) -> pd.Series:
    d = pd.to_datetime(s)
    return (d - pd.to_timedelta(d.dt.weekday, unit="D")).dt.normalize()


def _require(schema: Mapping, key: str) -> str:
    if key not in schema or not schema[key]:
        raise SchemaError(f"schema is missing required key {key!r}")
    return schema[key]


def load_schema(path) -> dict:
    return json.loads(Path(path).read_text())


def panel_from_frame(df: pd.DataFrame, schema: Mapping) -> PanelDataset:
    """Build a validated :class:`PanelDataset` from a long data frame.

    ``schema`` keys: ``unit``, ``time``, ``outcome``, one of ``cohort`` or
    ``treatment_date``, optional ``exposure``, ``covariates_static``,
    ``covariates_tv``.
    """
    ucol, tcol, ycol = (_require(schema, k) for k in ("unit", "time", "outcome"))
    ccol = schema.get("cohort")
    dcol = schema.get("treatment_date")
    if not ccol and not dcol:
        raise SchemaError("schema needs a 'cohort' or 'treatment_date' column")
    xs = list(schema.get("covariates_static", []))
    xtv = list(schema.get("covariates_tv", []))
    ecol = schema.get("exposure")
    needed = [ucol, tcol, ycol, ccol or dcol, *xs, *xtv] + ([ecol] if ecol else [])
    for c in needed:
        if c not in df.columns:
            raise SchemaError(f"missing column {c!r}")

    df = df.copy()
    df[ucol] = df[ucol].astype(str)
    dated = not pd.api.types.is_integer_dtype(df[tcol])
    if dated:
        df[tcol] = _week_start(df[tcol])
    dup = df.duplicated([ucol, tcol])
    if dup.any():
        u, t = df.loc[dup, [ucol, tcol]].iloc[0]
        raise PanelValidationError(f"duplicate (unit, time) cell ({u}, {t})")

    raw_times = np.sort(df[tcol].unique())
    if dated:
        start = pd.Timestamp(raw_times[0])
        n_weeks = (pd.Timestamp(raw_times[-1]) - start).days // 7 + 1
        grid = [start + pd.Timedelta(weeks=k) for k in range(n_weeks)]
    else:
        grid = list(range(int(raw_times[0]), int(raw_times[-1]) + 1))
    index = {v: k + 1 for k, v in enumerate(grid)}
    units = list(dict.fromkeys(df[ucol]))
    T = len(grid)

    wide = df.pivot(index=ucol, columns=tcol, values=ycol).reindex(index=units, columns=grid)
    missing = np.argwhere(wide.isna().to_numpy())
    if len(missing):
        cells = ", ".join(f"({units[i]}, {grid[t]})" for i, t in missing[:10])
        raise PanelValidationError(f"unbalanced panel; missing cells: {cells}")

    first = df.groupby(ucol, sort=False).first().reindex(units)
    for c in [ccol or dcol, *xs] + ([ecol] if ecol else []):
        varying = df.groupby(ucol, sort=False)[c].nunique(dropna=False)
        if (varying > 1).any():
            raise PanelValidationError(f"column {c!r} must be constant within unit")

    cohort = []
    if ccol or not dated:
        # integer cohort labels on the raw time scale
        for u, v in first[ccol or dcol].items():
            if pd.isna(v) or int(v) == NEVER:
                cohort.append(NEVER)
                continue
            v = int(v)
            if v < grid[0]:
                raise PanelValidationError(f"unit {u}: cohort {v} precedes the first period")
            cohort.append(index.get(v, NEVER))
    else:
        for u, d in pd.to_datetime(first[dcol]).items():
            if pd.isna(d):
                cohort.append(NEVER)
                continue
            k = ((d - pd.Timedelta(days=d.weekday())).normalize() - grid[0]).days // 7 + 1
            if k < 1:
                raise PanelValidationError(f"unit {u}: treatment date {d.date()} precedes period 1")
            cohort.append(k if k <= T else NEVER)

    cohort = np.array(cohort, dtype=int)
    if ((cohort == 1)).any():
        u = units[int(np.flatnonzero(cohort == 1)[0])]
        raise PanelValidationError(f"unit {u} is treated in the first period and has no pre-period")

    static = first[xs].to_numpy(float) if xs else None
    tv = None
    if xtv:
        tv = np.stack(
            [df.pivot(index=ucol, columns=tcol, values=c).reindex(index=units, columns=grid).to_numpy(float)
             for c in xtv],
            axis=-1,
        )
    exposure = first[ecol].to_numpy(float) if ecol else None
    return PanelDataset(
        units=units,
        times=np.arange(1, T + 1),
        outcome=wide.to_numpy(float),
        cohort=cohort,
        covariates_static=static,
        static_names=xs,
        covariates_tv=tv,
        tv_names=xtv,
        exposure=exposure,
    )


def load_panel(path, schema: Mapping | str | Path) -> PanelDataset:
    """Read a long-format CSV panel described by a column-mapping schema."""
    if not isinstance(schema, Mapping):
        schema = load_schema(schema)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    ucol = _require(schema, "unit")
    return panel_from_frame(pd.read_csv(path, dtype={ucol: str}, float_precision="round_trip"), schema)


def save_panel(dataset: PanelDataset, path, schema_path=None) -> dict:
    """Write the panel as canonical long CSV (and its schema JSON); returns the schema."""
    dataset.to_frame().to_csv(path, index=False, float_format="%.17g")
    schema = dataset.canonical_schema()
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps(schema, indent=2) + "\n")
    return schema
