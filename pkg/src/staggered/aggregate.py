"""Event-time aggregation of group-time estimates and the event-study result contract."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
from scipy import stats

from .drdid import multiplier_bootstrap

CSV_COLUMNS = ["event_time", "estimate", "se", "ci_low", "ci_high", "sim_low", "sim_high"]
SCM_COLUMNS = ["event_time", "estimate", "se", "ci_upper", "ci_lower"]
DEFAULT_WINDOW = (-8, 12)


class SchemaMismatch(ValueError):
    pass


@dataclass
class EventStudyEntry:
    e: int
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    sim_low: float
    sim_high: float
    n_cohorts: int
    weights: dict[int, float] = field(default_factory=dict)
    reference: bool = False


@dataclass
class EventStudyResult:
    entries: list[EventStudyEntry]
    method: str
    horizon: int
    level: float = 0.95
    critical_value: float = float("nan")
    flagged: list[str] = field(default_factory=list)
    influence: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda r: r.e)
        es = [r.e for r in self.entries]
        if len(set(es)) != len(es):
            raise ValueError("duplicate event times in result")

    @property
    def event_times(self) -> list[int]:
        return [r.e for r in self.entries]

    def __getitem__(self, e: int) -> EventStudyEntry:
        for r in self.entries:
            if r.e == e:
                return r
        raise KeyError(e)

    def estimates(self) -> dict[int, float]:
        return {r.e: r.estimate for r in self.entries}

    def window(self, lo: int, hi: int) -> "EventStudyResult":
        keep = [k for k, r in enumerate(self.entries) if lo <= r.e <= hi]
        infl = None if self.influence is None else self.influence[:, keep]
        return EventStudyResult(
            [self.entries[k] for k in keep], self.method, self.horizon, self.level,
            self.critical_value, list(self.flagged), infl,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[r.e, r.estimate, r.se, r.ci_low, r.ci_high, r.sim_low, r.sim_high] for r in self.entries],
            columns=CSV_COLUMNS,
        )

    def to_csv(self, path) -> None:
        df = self.to_frame()
        validate_frame(df)
        df.to_csv(path, index=False, float_format="%.12g")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "horizon": self.horizon,
            "level": self.level,
            "critical_value": self.critical_value,
            "flagged": self.flagged,
            "entries": [
                {**{k: v for k, v in asdict(r).items() if k != "weights"},
                 "weights": {str(g): w for g, w in r.weights.items()}}
                for r in self.entries
            ],
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n")


def validate_frame(df: pd.DataFrame, columns=CSV_COLUMNS, key=("event_time",)) -> None:
    """Raise :class:`SchemaMismatch` naming the first offending column."""
    for c in columns:
        if c not in df.columns:
            raise SchemaMismatch(f"missing column {c!r}")
    extra = [c for c in df.columns if c not in columns]
    if extra:
        raise SchemaMismatch(f"unexpected column {extra[0]!r}")
    if df.duplicated(list(key)).any():
        raise SchemaMismatch(f"column {key[-1]!r} has duplicate values")


def read_event_study(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    validate_frame(df)
    return df.sort_values("event_time").reset_index(drop=True)


def aggregate(
    cells: Iterable,
    cohort_sizes: Mapping[int, float],
    event_times: Iterable[int] | None = None,
    level: float = 0.95,
    B: int = 1000,
    seed=0,
    method: str = "",
    horizon: int | None = None,
    reference: int | None = -1,
) -> EventStudyResult:
    """Share-weighted event-time average of group-time cells.

    Each cell needs ``g``, ``t``, ``estimate`` and a full-length ``influence``.
    At event time ``e`` the cohorts with an estimated cell at ``t = g + e``
    receive weight proportional to their size. Shares are treated as known, so
    the aggregate influence is the same weighted sum of cell influences.

    ``reference`` adds a normalised row (estimate 0, se 0) at that event time
    when no cell exists there.
    """
    cells = [c for c in cells if getattr(c, "error", None) is None and np.isfinite(c.estimate)]
    flagged = []
    if not cells:
        raise ValueError("no estimated cells to aggregate")
    n = len(cells[0].influence)
    for c in cells:
        if len(c.influence) != n:
            raise ValueError(
                f"influence length {len(c.influence)} of cell (g={c.g}, t={c.t}) != {n}"
            )
    by_e: dict[int, list] = {}
    for c in cells:
        by_e.setdefault(c.t - c.g, []).append(c)
    wanted = sorted(by_e) if event_times is None else sorted(set(event_times))
    if event_times is None and reference is not None and min(by_e) < reference < max(by_e):
        wanted = sorted(set(wanted) | {reference})
    horizon = horizon if horizon is not None else max(c.t for c in cells)

    rows, infl = [], []
    for e in wanted:
        group = sorted(by_e.get(e, []), key=lambda c: c.g)
        group = [c for c in group if c.t <= horizon]
        if not group:
            if e != reference:
                flagged.append(f"event time {e}: no estimated cells")
            continue
        sizes = np.array([cohort_sizes[c.g] for c in group], dtype=float)
        w = sizes / sizes.sum()
        est = float(sum(wk * c.estimate for wk, c in zip(w, group)))
        psi = np.zeros(n)
        for wk, c in zip(w, group):
            psi += wk * c.influence
        rows.append((e, est, {int(c.g): float(wk) for wk, c in zip(w, group)}))
        infl.append(psi)

    if not rows:
        raise ValueError("no event time has estimated cells")
    psi = np.column_stack(infl)
    se = np.sqrt(np.mean(psi**2, axis=0) / n)
    z = stats.norm.ppf(0.5 + level / 2)
    crit = z
    if np.any(se > 0):
        band = multiplier_bootstrap(psi, B=B, level=level, seed=seed)
        # the simultaneous band never undercuts the pointwise one
        crit = max(band.critical_value, z)
    entries = [
        EventStudyEntry(e, est, float(s), est - z * s, est + z * s, est - crit * s, est + crit * s, len(wts), wts)
        for (e, est, wts), s in zip(rows, se)
    ]
    if reference is not None and reference in wanted and reference not in by_e:
        entries.append(EventStudyEntry(reference, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, {}, reference=True))
        psi = np.column_stack([psi, np.zeros(n)])
    order = np.argsort([r.e for r in entries], kind="stable")
    entries = [entries[k] for k in order]
    return EventStudyResult(entries, method, horizon, level, crit, flagged, psi[:, order])
