"""Configuration, ingestion, regularization and persistence.

File formats
------------
* Series CSV: header ``timestamp,value``; timestamps numeric or ISO-8601.
* Ensemble CSV: header ``path_id,t,x``, one row per (path, grid time).
* Ensemble binary: the 5-byte magic ``ENSB1``, then little-endian
  ``uint64 n_paths, uint64 n_points, float64 t0, float64 dt`` and
  ``n_paths * n_points`` float64 values in row-major (path-major) order.
* Bundle: a directory with ``manifest.json`` plus CSV tables under
  ``tables/``. Floats are written with 17 significant digits.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import os
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from . import __version__
from .ensemble_builder import LongSeries
from .errors import IntegrityError, RejectedInputError
from .process_sim import PathEnsemble, ProcessSpec, TimeGrid

__all__ = [
    "BUNDLE_FORMAT",
    "ConfigError",
    "GapStats",
    "ResultBundle",
    "RunConfig",
    "Table",
    "load_bundle",
    "load_config",
    "load_series",
    "read_ensemble",
    "regularize",
    "save_bundle",
    "write_ensemble_binary",
    "write_ensemble_csv",
]

BUNDLE_FORMAT = "ensemblab-bundle"
ENSB_MAGIC = b"ENSB1"
_ENSB_HEADER = struct.Struct("<QQdd")
SEED_ENV = "ENSEMBLAB_SEED"


class ConfigError(RejectedInputError):
    """A run configuration failed validation; the message names the field."""


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, columns: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        # the minimal dialect leaves a bare carriage return unquoted, which splits the row on reading
        wq = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_ALL)
        for row in [columns, *rows]:
            cells = [_fmt(v) for v in row]
            (wq if any("\r" in c for c in cells) else w).writerow(cells)


# ---------------------------------------------------------------------------
# Series
# ---------------------------------------------------------------------------


def _parse_timestamp(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    ts = _dt.datetime.fromisoformat(text.strip())
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=_dt.timezone.utc)
    return ts.timestamp()


def load_series(path, fmt: str = "csv", value_kind: str = "level") -> LongSeries:
    """Read a ``timestamp,value`` CSV into a :class:`LongSeries`."""
    if fmt != "csv":
        raise RejectedInputError(f"unsupported series format {fmt!r}; only 'csv' is supported")
    path = FsPath(path)
    if not path.is_file():
        raise RejectedInputError(f"series file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RejectedInputError(f"{path}: empty file")
        names = [h.strip().lower() for h in header]
        if "timestamp" not in names or "value" not in names:
            raise RejectedInputError(f"{path}: header must contain 'timestamp' and 'value', got {header}")
        it, iv = names.index("timestamp"), names.index("value")
        ts, vs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                t = _parse_timestamp(row[it])
                v = float(row[iv])
            except (ValueError, IndexError):
                raise RejectedInputError(f"{path}: line {lineno}: cannot parse {row!r}") from None
            if ts and t == ts[-1]:
                raise RejectedInputError(f"{path}: line {lineno}: duplicate timestamp {row[it]!r}")
            if ts and t < ts[-1]:
                raise RejectedInputError(
                    f"{path}: line {lineno}: timestamps not increasing at index {len(ts)} ({row[it]!r})"
                )
            ts.append(t)
            vs.append(v)
    if not ts:
        raise RejectedInputError(f"{path}: no data rows")
    return LongSeries(np.array(ts), np.array(vs), value_kind)


def write_series(series: LongSeries, path) -> None:
    write_csv(path, ["timestamp", "value"], zip(series.timestamps, series.values))


class GapStats(NamedTuple):
    n_grid: int
    n_filled: int
    max_consecutive_filled: int


class Regularized(NamedTuple):
    series: LongSeries
    gaps: GapStats


def regularize(series: LongSeries, dt: float) -> Regularized:
    """Previous-tick resampling onto the uniform grid ``t_first + k*dt``.

    A grid time without an exact sample takes the last observed value
    before it and counts as filled.
    """
    if not (math.isfinite(dt) and dt > 0):
        raise RejectedInputError(f"dt must be > 0, got {dt}")
    ts, vs = series.timestamps, series.values
    if ts.size >= 2:
        min_gap = float(np.min(np.diff(ts)))
        if dt < min_gap / 10:
            raise RejectedInputError(f"dt={dt} oversamples the series (minimum spacing {min_gap}, limit spacing/10)")
    tol = 1e-9 * dt
    n = int(math.floor((ts[-1] - ts[0]) / dt + 1e-9))
    grid = ts[0] + dt * np.arange(n + 1)
    idx = np.searchsorted(ts, grid + tol, side="right") - 1
    exact = np.abs(ts[idx] - grid) <= tol
    filled = ~exact
    longest, run = 0, 0
    for f in filled:
        run = run + 1 if f else 0
        longest = max(longest, run)
    out = LongSeries(grid, vs[idx], series.value_kind)
    return Regularized(out, GapStats(int(grid.size), int(filled.sum()), int(longest)))


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


def write_ensemble_csv(ensemble: PathEnsemble, path) -> None:
    n, m = ensemble.values.shape
    t = ensemble.times
    with open(path, "w", newline="") as fh:
        fh.write("path_id,t,x\n")
        for k in range(n):
            fh.writelines(f"{k},{t[j]:.17g},{ensemble.values[k, j]:.17g}\n" for j in range(m))


def write_ensemble_binary(ensemble: PathEnsemble, path) -> None:
    n, m = ensemble.values.shape
    g = ensemble.grid
    with open(path, "wb") as fh:
        fh.write(ENSB_MAGIC)
        fh.write(_ENSB_HEADER.pack(n, m, g.t0, g.dt))
        fh.write(np.ascontiguousarray(ensemble.values, dtype="<f8").tobytes())


def _read_ensemble_binary(path) -> PathEnsemble:
    data = FsPath(path).read_bytes()
    if data[:5] != ENSB_MAGIC:
        raise IntegrityError(f"{path}: missing ENSB1 magic header")
    try:
        n, m, t0, dt = _ENSB_HEADER.unpack_from(data, 5)
    except struct.error:
        raise IntegrityError(f"{path}: truncated header") from None
    body = data[5 + _ENSB_HEADER.size :]
    if len(body) != 8 * n * m:
        raise IntegrityError(f"{path}: expected {n}x{m} doubles, found {len(body)} bytes")
    vals = np.frombuffer(body, dtype="<f8").reshape(n, m).astype(float)
    return PathEnsemble(TimeGrid(t0, dt, m - 1), vals)


def _read_ensemble_csv(path) -> PathEnsemble:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if [h.strip().lower() for h in header] != ["path_id", "t", "x"]:
            raise RejectedInputError(f"{path}: ensemble CSV header must be path_id,t,x")
        try:
            arr = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise RejectedInputError(f"{path}: {exc}") from None
    if arr.size == 0:
        raise RejectedInputError(f"{path}: no data rows")
    ids = arr[:, 0].astype(int)
    n = int(ids.max()) + 1
    if arr.shape[0] % n:
        raise RejectedInputError(f"{path}: paths have unequal lengths")
    m = arr.shape[0] // n
    order = np.lexsort((arr[:, 1], ids))
    arr = arr[order]
    times = arr[:, 1].reshape(n, m)
    if not np.all(times == times[0]):
        raise RejectedInputError(f"{path}: paths are not strobed at identical times")
    t = times[0]
    if m < 2:
        raise RejectedInputError(f"{path}: each path needs at least 2 points")
    dt = (t[-1] - t[0]) / (m - 1)
    if np.max(np.abs(np.diff(t) - dt)) > 1e-9 * max(abs(dt), 1.0):
        raise RejectedInputError(f"{path}: path times are not uniformly spaced")
    return PathEnsemble(TimeGrid(float(t[0]), float(dt), m - 1), arr[:, 2].reshape(n, m))


def read_ensemble(path) -> PathEnsemble:
    """Read an ensemble written by :func:`write_ensemble_csv` or :func:`write_ensemble_binary`."""
    path = FsPath(path)
    if not path.is_file():
        raise RejectedInputError(f"ensemble file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(5)
    if magic == ENSB_MAGIC:
        return _read_ensemble_binary(path)
    return _read_ensemble_csv(path)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_ANALYSES = (
    "sliding_increment_mean",
    "sliding_msf",
    "increment_autocorrelation",
    "volatility_correlation",
    "pair_correlation",
    "histograms",
    "equal_time",
)


@dataclass
class RunConfig:
    """Validated run configuration shared by every CLI subcommand.

    Exactly one of ``process`` (simulate) and ``input`` (read from files) is
    set. ``input`` holds one of the keys ``ensemble`` (an ensemble file),
    ``bundle`` (a simulate output directory) or ``series`` (a series CSV).
    """

    process: ProcessSpec | None = None
    input: dict | None = None
    grid: TimeGrid | None = None
    n_paths: int = 1
    seed: int = 0
    substeps: int | None = None
    analysis: dict = field(default_factory=dict)
    ensemble: dict = field(default_factory=dict)
    output: str | None = None
    seed_source: str = "config"

    def to_dict(self) -> dict:
        return {
            "process": None if self.process is None else self.process.to_dict(),
            "input": self.input,
            "grid": None if self.grid is None else self.grid.to_dict(),
            "n_paths": self.n_paths,
            "seed": self.seed,
            "substeps": self.substeps,
            "analysis": self.analysis,
            "ensemble": self.ensemble,
            "output": self.output,
            "seed_source": self.seed_source,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        has_proc, has_input = d.get("process") is not None, d.get("input") is not None
        if has_proc == has_input:
            raise ConfigError("exactly one of 'process' and 'input' must be given")
        try:
            process = ProcessSpec.from_dict(d["process"]) if has_proc else None
        except RejectedInputError as exc:
            raise ConfigError(f"process: {exc}") from None
        inp = None
        if has_input:
            inp = dict(d["input"])
            keys = {"ensemble", "bundle", "series"} & set(inp)
            if len(keys) != 1:
                raise ConfigError("input: give exactly one of 'ensemble', 'bundle', 'series'")
            vk = inp.get("value_kind", "level")
            if vk not in ("level", "price"):
                raise ConfigError(f"input.value_kind must be 'level' or 'price', got {vk!r}")
        grid = None
        if d.get("grid") is not None:
            try:
                grid = TimeGrid.from_dict(d["grid"])
            except (RejectedInputError, TypeError, ValueError) as exc:
                raise ConfigError(f"grid: {exc}") from None
        elif has_proc:
            raise ConfigError("grid: required when 'process' is given")
        n_paths = d.get("n_paths", 1)
        if not isinstance(n_paths, int) or isinstance(n_paths, bool) or n_paths < 1:
            raise ConfigError(f"n_paths: must be a positive integer, got {n_paths!r}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed: must be a non-negative integer, got {seed!r}")
        substeps = d.get("substeps")
        if substeps is not None and (not isinstance(substeps, int) or substeps < 1):
            raise ConfigError(f"substeps: must be a positive integer, got {substeps!r}")
        analysis = dict(d.get("analysis") or {})
        bad = set(analysis.get("estimators", [])) - set(_ANALYSES)
        if bad:
            raise ConfigError(f"analysis.estimators: unknown {sorted(bad)}; expected a subset of {list(_ANALYSES)}")
        for key in ("lags", "base_times"):
            vals = analysis.get(key, [])
            if not isinstance(vals, list) or not all(isinstance(v, (int, float)) for v in vals):
                raise ConfigError(f"analysis.{key}: must be a list of numbers")
            if key == "lags" and any(v <= 0 for v in vals):
                raise ConfigError("analysis.lags: lags must be > 0")
        cfg = cls(process, inp, grid, n_paths, seed, substeps, analysis, dict(d.get("ensemble") or {}),
                  d.get("output"), str(d.get("seed_source", "config")))
        if grid is not None:
            cfg.check_grid(grid)
        return cfg

    def check_grid(self, grid: TimeGrid) -> None:
        """Every requested lag and base time must be representable on ``grid``."""
        for T in self.analysis.get("lags", []):
            try:
                k = grid.steps(T, "lag")
            except RejectedInputError as exc:
                raise ConfigError(f"analysis.lags: {exc}") from None
            if k > grid.n_steps:
                raise ConfigError(f"analysis.lags: lag {T} exceeds the grid span")
        for t in self.analysis.get("base_times", []):
            try:
                grid.index(t, "base time")
            except RejectedInputError as exc:
                raise ConfigError(f"analysis.base_times: {exc}") from None


def load_config(path, apply_env: bool = True) -> RunConfig:
    """Read a JSON run configuration; ``$ENSEMBLAB_SEED`` overrides its seed."""
    path = FsPath(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = RunConfig.from_dict(raw)
    env = os.environ.get(SEED_ENV) if apply_env else None
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        if cfg.seed < 0:
            raise ConfigError(f"{SEED_ENV} must be non-negative")
        cfg.seed_source = "env"
    return cfg


# ---------------------------------------------------------------------------
# Result bundles
# ---------------------------------------------------------------------------

_TYPES = {"float": float, "int": int, "str": str, "bool": lambda s: s == "true"}


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


@dataclass
class Table:
    """Column-typed rows persisted as one CSV file."""

    columns: list[str]
    types: list[str]
    rows: list[tuple]

    def __post_init__(self) -> None:
        if len(self.columns) != len(self.types):
            raise RejectedInputError("table needs one type per column")
        bad = set(self.types) - set(_TYPES)
        if bad:
            raise RejectedInputError(f"unknown column types {sorted(bad)}")
        conv = [_TYPES[t] if t != "bool" else bool for t in self.types]
        self.rows = [tuple(c(v) for c, v in zip(conv, row)) for row in self.rows]
        if any(isinstance(v, str) and "\x00" in v for row in self.rows for v in row):
            raise RejectedInputError("table cells may not contain NUL characters")

    @classmethod
    def infer(cls, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> "Table":
        types = []
        for j in range(len(columns)):
            vals = [r[j] for r in rows]
            if vals and all(isinstance(v, (bool, np.bool_)) for v in vals):
                types.append("bool")
            elif vals and all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in vals):
                types.append("int")
            elif all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in vals):
                types.append("float")
            else:
                types.append("str")
        return cls(list(columns), types, [tuple(r) for r in rows])


@dataclass
class ResultBundle:
    """Config echo, keyed reports, tables and creation metadata.

    ``reports`` maps a key such as ``"sliding_msf|T=1"`` to
    ``{"op": ..., "params": {...}, "result": {...}}``.
    """

    config: dict
    reports: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    load_notes: list = field(default_factory=list, compare=False)

    @staticmethod
    def key(op: str, **params: Any) -> str:
        return op + "|" + ",".join(f"{k}={_fmt(v)}" for k, v in sorted(params.items()))

    def add_report(self, op: str, result: Mapping[str, Any], **params: Any) -> str:
        k = self.key(op, **params)
        self.reports[k] = {"op": op, "params": _jsonable(params), "result": _jsonable(result)}
        return k

    def add_table(self, name: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
        if not name.replace("_", "").replace("-", "").isalnum():
            raise RejectedInputError(f"table name {name!r} must be alphanumeric with - or _")
        self.tables[name] = Table.infer(columns, rows)


def _sha256(path) -> str:
    return hashlib.sha256(FsPath(path).read_bytes()).hexdigest()


def _clear_bundle_dir(d: FsPath) -> None:
    for name in ("manifest.json", ".failed"):
        p = d / name
        if p.exists():
            p.unlink()
    for sub in ("tables", "reports"):
        if (d / sub).is_dir():
            shutil.rmtree(d / sub)


def save_bundle(bundle: ResultBundle, directory, overwrite: bool = False, extra_files: Mapping[str, str] | None = None) -> FsPath:
    """Write ``bundle`` to ``directory`` and return the manifest path.

    ``extra_files`` maps artifact names to files (relative to ``directory``)
    already written there; their checksums are recorded in the manifest.
    """
    d = FsPath(directory)
    if d.exists() and not d.is_dir():
        raise RejectedInputError(f"{d} exists and is not a directory")
    if d.is_dir() and any(d.iterdir()):
        if not overwrite:
            existing = set(os.listdir(d)) - set((extra_files or {}).values())
            if existing:
                raise RejectedInputError(f"refusing to write into non-empty directory {d} (use overwrite)")
        else:
            _clear_bundle_dir(d)
    (d / "tables").mkdir(parents=True, exist_ok=True)
    tables = {}
    for name, tab in sorted(bundle.tables.items()):
        rel = f"tables/{name}.csv"
        write_csv(d / rel, tab.columns, tab.rows)
        tables[name] = {"file": rel, "columns": tab.columns, "types": tab.types,
                        "n_rows": len(tab.rows), "sha256": _sha256(d / rel)}
    artifacts = {}
    for name, rel in sorted((extra_files or {}).items()):
        if not (d / rel).is_file():
            raise RejectedInputError(f"artifact {name!r} not found at {d / rel}")
        artifacts[name] = {"file": rel, "sha256": _sha256(d / rel)}
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": __version__,
        "config": _jsonable(bundle.config),
        "metadata": _jsonable(bundle.metadata),
        "reports": _jsonable(bundle.reports),
        "tables": tables,
        "artifacts": artifacts,
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _require(obj: Mapping, name: str, typ, where: str = ""):
    full = f"{where}{name}"
    if not isinstance(obj, Mapping) or name not in obj:
        raise IntegrityError(f"manifest field {full!r} is missing")
    v = obj[name]
    if not isinstance(v, typ):
        raise IntegrityError(f"manifest field {full!r} has type {type(v).__name__}")
    return v


def load_bundle(directory) -> ResultBundle:
    """Reconstruct a bundle written by :func:`save_bundle`, verifying checksums."""
    d = FsPath(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise RejectedInputError(f"no bundle manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"manifest is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    fmt = _require(manifest, "format", str)
    if fmt != BUNDLE_FORMAT:
        raise IntegrityError(f"manifest field 'format' is {fmt!r}, expected {BUNDLE_FORMAT!r}")
    version = _require(manifest, "version", str)
    config = _require(manifest, "config", dict)
    metadata = _require(manifest, "metadata", dict)
    reports = _require(manifest, "reports", dict)
    for k, rep in reports.items():
        _require(rep, "op", str, f"reports.{k}.")
        _require(rep, "params", dict, f"reports.{k}.")
        _require(rep, "result", dict, f"reports.{k}.")
    tables = {}
    for name, spec in _require(manifest, "tables", dict).items():
        where = f"tables.{name}."
        rel = _require(spec, "file", str, where)
        cols = _require(spec, "columns", list, where)
        types = _require(spec, "types", list, where)
        n_rows = _require(spec, "n_rows", int, where)
        sha = _require(spec, "sha256", str, where)
        f = d / rel
        if not f.is_file():
            raise IntegrityError(f"manifest field '{where}file' points to missing file {rel}")
        if _sha256(f) != sha:
            raise IntegrityError(f"manifest field '{where}sha256' does not match {rel}")
        if set(types) - set(_TYPES):
            raise IntegrityError(f"manifest field '{where}types' has unknown types")
        with open(f, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, [])
            if header != cols:
                raise IntegrityError(f"manifest field '{where}columns' does not match the header of {rel}")
            conv = [_TYPES[t] for t in types]
            rows = [tuple(c(v) for c, v in zip(conv, row)) for row in reader]
        if len(rows) != n_rows:
            raise IntegrityError(f"manifest field '{where}n_rows' is {n_rows}, file has {len(rows)}")
        tables[name] = Table(cols, types, rows)
    for name, spec in manifest.get("artifacts", {}).items():
        where = f"artifacts.{name}."
        rel = _require(spec, "file", str, where)
        sha = _require(spec, "sha256", str, where)
        if not (d / rel).is_file() or _sha256(d / rel) != sha:
            raise IntegrityError(f"manifest field '{where}sha256' does not match {rel}")
    notes = []
    if version != __version__:
        notes.append(f"warning: bundle written by version {version}, loaded by {__version__}")
    return ResultBundle(config, reports, tables, metadata, notes)


def artifact_path(directory, name: str) -> FsPath | None:
    """Location of a named artifact recorded in a bundle manifest."""
    manifest = json.loads((FsPath(directory) / "manifest.json").read_text())
    spec = manifest.get("artifacts", {}).get(name)
    return None if spec is None else FsPath(directory) / spec["file"]
