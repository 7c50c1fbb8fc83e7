"""Command-line front end: ingest, simulate, estimate, benchmark and report.

Every command writes a manifest JSON next to its outputs with the resolved
configuration, package versions and SHA-256 hashes of inputs and outputs.
Errors exit nonzero and print a JSON object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .aggregate import CSV_COLUMNS, DEFAULT_WINDOW, SCM_COLUMNS, read_event_study, validate_frame
from .benchmark import METHODS, EstimatorOptions, estimate, run_benchmark
from .panel import asinh_outcome, load_panel, load_schema, repair_panel, save_panel
from .simgen import SimSpec, generate

log = logging.getLogger(__name__)

COMMANDS = ("ingest", "simulate", "estimate", "benchmark", "report")
LONG_COLUMNS = ["method", "event_time", "estimate", "ci_low", "ci_high"]


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    method: str | None = None
    methods: list[str] = field(default_factory=list)
    input: str | None = None
    inputs: list[str] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    output: str | None = None
    schema: str | dict | None = None
    sim: dict = field(default_factory=dict)
    seed: int = 0
    reps: int = 200
    level: float = 0.95
    control_group: str = "never"
    delta: int = 0
    base_period: str = "varying"
    covariates: list[str] = field(default_factory=list)
    lam: float | str = 0.0
    nu: float = 0.5
    max_event: int = 12
    bootstrap_B: int = 1000
    window: list[int] = field(default_factory=lambda: list(DEFAULT_WINDOW))
    workers: int = 1
    repair: bool = False
    asinh: bool = False

    def validate(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        need = {
            "ingest": ("input", "output", "schema"),
            "simulate": ("output",),
            "estimate": ("method", "input", "output"),
            "benchmark": ("output",),
            "report": ("output",),
        }[self.command]
        for k in need:
            if not getattr(self, k):
                raise UsageError(f"{self.command} requires --{k.replace('_', '-')}")
        if self.method is not None and self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        for m in self.methods:
            if m not in METHODS:
                raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.command == "benchmark" and not self.methods:
            raise UsageError("benchmark requires --methods")
        if self.command == "report" and len(self.inputs) < 2:
            raise UsageError("report needs at least two --inputs")
        if self.labels and len(self.labels) != len(self.inputs):
            raise UsageError("--labels must match --inputs one to one")
        if self.control_group not in ("never", "notyet"):
            raise UsageError("--control-group must be 'never' or 'notyet'")
        if not 0 < self.level < 1:
            raise UsageError("--level must lie in (0, 1)")
        if self.lam != "auto" and float(self.lam) < 0:
            raise UsageError("--lambda must be non-negative or 'auto'")
        if len(self.window) != 2 or self.window[0] > self.window[1]:
            raise UsageError("--window needs LO HI with LO <= HI")
        if self.reps < 1 or self.workers < 1:
            raise UsageError("--reps and --workers must be positive")
        outs = {str(Path(self.output).resolve())} if self.output else set()
        for p in [self.input, *self.inputs]:
            if p and str(Path(p).resolve()) in outs:
                raise UsageError(f"output path {self.output} is also an input")

    def options(self) -> EstimatorOptions:
        return EstimatorOptions(
            control_group=self.control_group, delta=self.delta, base_period=self.base_period,
            covariates=tuple(self.covariates), lam=self.lam if self.lam == "auto" else float(self.lam),
            nu=self.nu, max_event=self.max_event, level=self.level, bootstrap_B=self.bootstrap_B,
            window=tuple(self.window),
        )

    def echo(self) -> dict:
        """Configuration as recorded in the manifest; paths reduced to file names."""
        d = asdict(self)
        for k in ("input", "output"):
            if d[k]:
                d[k] = Path(d[k]).name
        d["inputs"] = [Path(p).name for p in d["inputs"]]
        if isinstance(d["schema"], str):
            d["schema"] = Path(d["schema"]).name
        return d


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="staggered", description="Staggered-adoption event-study estimators.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--methods", help="comma-separated list for benchmark")
    p.add_argument("--input", help="panel CSV (estimate) or raw CSV (ingest)")
    p.add_argument("--inputs", nargs="+", default=None, help="event-study CSVs to compare (report)")
    p.add_argument("--labels", nargs="+", default=None, help="method labels for --inputs")
    p.add_argument("--output", help="output file (estimate, ingest, simulate, report) or directory (benchmark)")
    p.add_argument("--config", help="JSON file of option defaults; flags override it")
    p.add_argument("--schema", help="column-mapping JSON for the input panel")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--control-group", choices=("never", "notyet"))
    p.add_argument("--delta", type=int, help="anticipation periods")
    p.add_argument("--base-period", choices=("varying", "universal"))
    p.add_argument("--covariates", help="comma-separated covariate names")
    p.add_argument("--lambda", dest="lam", help="ridge penalty for ascm, or 'auto'")
    p.add_argument("--nu", type=float)
    p.add_argument("--max-event", type=int)
    p.add_argument("--bootstrap-B", dest="bootstrap_B", type=int)
    p.add_argument("--window", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--workers", type=int)
    p.add_argument("--repair", action="store_true", default=None, help="spline-repair negative outcomes (ingest)")
    p.add_argument("--asinh", action="store_true", default=None, help="inverse hyperbolic sine outcome (ingest)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        base = json.loads(path.read_text())
        if "lambda" in base:
            base["lam"] = base.pop("lambda")
        known = {f.name for f in fields(RunConfig)}
        extra = sorted(set(base) - known)
        if extra:
            raise UsageError(f"unknown config keys {extra}")
    cfg = {**base, "command": args.command}
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        if k in ("methods", "covariates"):
            v = [s.strip() for s in v.split(",") if s.strip()]
        if k == "lam" and v != "auto":
            try:
                v = float(v)
            except ValueError:
                raise UsageError(f"--lambda expects a number or 'auto', got {v!r}") from None
        cfg[k] = v
    rc = RunConfig(**cfg)
    rc.validate()
    return rc


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path, df: pd.DataFrame, columns=None, key=("event_time",)) -> None:
    if columns is not None:
        validate_frame(df, columns, key)
    df.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def versions() -> dict:
    return {
        "staggered": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def write_manifest(path, cfg: RunConfig, inputs, outputs) -> None:
    write_json(path, {
        "command": cfg.command,
        "config": cfg.echo(),
        "seed": cfg.seed,
        "versions": versions(),
        "inputs": {Path(p).name: sha256(p) for p in inputs},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
    })


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _require_file(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _panel_schema(cfg: RunConfig, path: Path) -> tuple[dict, list]:
    """Schema from --schema/config, else a ``<stem>.schema.json`` sidecar, else canonical columns."""
    if isinstance(cfg.schema, dict):
        return cfg.schema, []
    if cfg.schema:
        return load_schema(_require_file(cfg.schema)), [cfg.schema]
    side = _sibling(path, ".schema.json")
    if side.exists():
        return load_schema(side), [side]
    return {"unit": "unit", "time": "time", "outcome": "outcome", "cohort": "cohort"}, []


def cmd_ingest(cfg: RunConfig) -> None:
    src = _require_file(cfg.input)
    schema, extra = _panel_schema(cfg, src)
    data = load_panel(src, schema)
    report = None
    if cfg.repair:
        data, report = repair_panel(data)
    if cfg.asinh:
        data = data.replace(outcome=asinh_outcome(data.outcome))
    out = Path(cfg.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    side = _sibling(out, ".schema.json")
    save_panel(data, out, side)
    outputs = [out, side]
    if report is not None:
        rpath = _sibling(out, ".cleaning.json")
        report.to_json(rpath)
        outputs.append(rpath)
    write_manifest(_sibling(out, ".manifest.json"), cfg, [src, *extra], outputs)


def cmd_simulate(cfg: RunConfig) -> None:
    spec = SimSpec.from_dict(dict(cfg.sim)) if cfg.sim else SimSpec()
    spec.seed = cfg.seed
    data, truth = generate(spec)
    out = Path(cfg.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    side = _sibling(out, ".schema.json")
    save_panel(data, out, side)
    tpath = _sibling(out, ".truth.json")
    write_json(tpath, truth.to_dict())
    spath = _sibling(out, ".spec.json")
    spec.to_json(spath)
    write_manifest(_sibling(out, ".manifest.json"), cfg, [], [out, side, tpath, spath])


def cmd_estimate(cfg: RunConfig) -> None:
    src = _require_file(cfg.input)
    schema, extra = _panel_schema(cfg, src)
    data = load_panel(src, schema)
    res, diag = estimate(data, cfg.method, cfg.options(), seed=cfg.seed)
    out = Path(cfg.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, res.to_frame(), CSV_COLUMNS)
    jpath = _sibling(out, ".json")
    write_json(jpath, res.to_dict())
    outputs = [out, jpath]
    table = diag.pop("scm_table", None)
    if table is not None:
        tpath = _sibling(out, ".scm.csv")
        write_csv(tpath, table, SCM_COLUMNS)
        outputs.append(tpath)
    dpath = _sibling(out, ".diagnostics.json")
    write_json(dpath, diag)
    outputs.append(dpath)
    write_manifest(_sibling(out, ".manifest.json"), cfg, [src, *extra], outputs)


def cmd_benchmark(cfg: RunConfig) -> None:
    spec = SimSpec.from_dict(dict(cfg.sim)) if cfg.sim else SimSpec()
    tables, summary = run_benchmark(spec, cfg.methods, cfg.reps, cfg.seed, cfg.options(), cfg.workers)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    lo, hi = cfg.window
    for m, df in tables.items():
        path = out / f"{m}.csv"
        write_csv(path, df[(df.event_time >= lo) & (df.event_time <= hi)])
        outputs.append(path)
    spath = out / "summary.json"
    write_json(spath, {**summary, "spec": json.loads(spec.to_json())})
    outputs.append(spath)
    write_manifest(out / "manifest.json", cfg, [], outputs)


def compare_report(paths, labels=None) -> pd.DataFrame:
    """Long table (method, event_time, estimate, ci_low, ci_high) over the union of event times.

    Event times missing from a file appear with empty values so gaps stay explicit.
    """
    frames = []
    seen: dict[str, int] = {}
    for k, p in enumerate(paths):
        df = read_event_study(_require_file(p))
        label = labels[k] if labels else Path(p).stem
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}#{seen[label]}"
        frames.append((label, df.set_index("event_time")))
    union = sorted(set().union(*(set(df.index) for _, df in frames)))
    rows = []
    for label, df in frames:
        df = df.reindex(union)
        for e in union:
            r = df.loc[e]
            rows.append([label, e, r["estimate"], r["ci_low"], r["ci_high"]])
    return pd.DataFrame(rows, columns=LONG_COLUMNS)


def wide_table(long: pd.DataFrame) -> pd.DataFrame:
    wide = long.pivot(index="event_time", columns="method", values=["estimate", "ci_low", "ci_high"])
    order = list(dict.fromkeys(long["method"]))
    wide = wide.reindex(columns=[(v, m) for m in order for v in ("estimate", "ci_low", "ci_high")])
    wide.columns = [f"{m}_{v}" for v, m in wide.columns]
    return wide.reset_index()


def cmd_report(cfg: RunConfig) -> None:
    long = compare_report(cfg.inputs, cfg.labels or None)
    out = Path(cfg.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, long, LONG_COLUMNS, key=("method", "event_time"))
    wpath = _sibling(out, ".wide.csv")
    write_csv(wpath, wide_table(long))
    write_manifest(_sibling(out, ".manifest.json"), cfg, cfg.inputs, [out, wpath])


HANDLERS = {
    "ingest": cmd_ingest,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    err = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "filename", None)
    if path is None and isinstance(exc, FileNotFoundError) and exc.args:
        path = str(exc.args[-1]).split(": ", 1)[-1]
    if path is not None:
        err["path"] = str(path)
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if "-v" in argv or "--verbose" in argv:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except (FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
        return _fail("config", exc, 2)
    try:
        HANDLERS[cfg.command](cfg)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        return _fail("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
