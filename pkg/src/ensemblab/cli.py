"""Batch command-line interface.

Subcommands ``simulate``, ``analyze``, ``build-ensemble`` and ``report``
share one JSON configuration schema (see :class:`ensemblab.data_io.RunConfig`).

Exit codes: 0 on success, 1 for input/configuration/bundle errors, 2 for
numerical or analysis failures (including "no significant period"). A
command that fails after it started writing its output directory leaves a
``.failed`` marker there.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Callable, Sequence

from . import __version__
from . import densities as dens
from . import estimators as est
from .data_io import (
    ConfigError,
    ResultBundle,
    RunConfig,
    artifact_path,
    load_bundle,
    load_config,
    load_series,
    read_ensemble,
    regularize,
    save_bundle,
    write_csv,
    write_ensemble_binary,
)
from .ensemble_builder import (
    boundary_correlation_check,
    detect_periodicity,
    intraday_profile,
    segment_series,
)
from .errors import (
    EnsemblabError,
    InsufficientDataError,
    IntegrityError,
    NormalizationError,
    NumericalError,
    RejectedInputError,
)
from .process_sim import PathEnsemble, simulate_ensemble

__all__ = ["CommandOutcome", "NoPeriodError", "main"]

ENSEMBLE_FILE = "paths.ensb"
FAILED_MARKER = ".failed"
AGREE_SE = 4.0
DISAGREE_SE = 5.0


class NoPeriodError(EnsemblabError):
    """No candidate period beat the null and no fixed period was configured."""


@dataclass
class CommandOutcome:
    exit_code: int
    summary: str
    artifacts: list[str] = field(default_factory=list)


class _Output:
    """Tracks whether a command has started writing its output directory."""

    def __init__(self, directory: FsPath | None, overwrite: bool) -> None:
        self.dir = directory
        self.overwrite = overwrite
        self.touched = False

    def prepare(self) -> FsPath:
        if self.dir is None:
            raise ConfigError("output: no output directory given (use --out or the 'output' config field)")
        d = self.dir
        if d.exists() and not d.is_dir():
            raise RejectedInputError(f"{d} exists and is not a directory")
        if d.is_dir() and any(d.iterdir()) and not self.overwrite:
            raise RejectedInputError(f"refusing to write into non-empty directory {d} (use --overwrite)")
        d.mkdir(parents=True, exist_ok=True)
        self.touched = True
        marker = d / FAILED_MARKER
        if marker.exists():
            marker.unlink()
        return d


def _metadata(cfg: RunConfig, command: str) -> dict:
    return {
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "seed_source": cfg.seed_source,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _load_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.seed = args.seed
        cfg.seed_source = "cli"
    return cfg


def _out_dir(args, cfg: RunConfig | None) -> FsPath | None:
    if args.out is not None:
        return FsPath(args.out)
    if cfg is not None and cfg.output:
        base = FsPath(args.config).parent if getattr(args, "config", None) else FsPath(".")
        return base / cfg.output
    return None


def _resolve(cfg_path, ref: str) -> FsPath:
    p = FsPath(ref)
    return p if p.is_absolute() or cfg_path is None else FsPath(cfg_path).parent / p


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args, out: _Output) -> CommandOutcome:
    cfg = _load_config(args)
    if cfg.process is None:
        raise ConfigError("process: simulate needs a 'process' section")
    out.dir = _out_dir(args, cfg)
    d = out.prepare()
    ens = simulate_ensemble(cfg.process, cfg.grid, cfg.n_paths, cfg.seed, cfg.substeps, threads=args.threads)
    write_ensemble_binary(ens, d / ENSEMBLE_FILE)
    bundle = ResultBundle(cfg.to_dict(), metadata=_metadata(cfg, "simulate"))
    g = cfg.grid
    bundle.add_report("simulate", {"n_paths": ens.n_paths, "t0": g.t0, "dt": g.dt, "n_steps": g.n_steps,
                                   "seed_tag": ens.seed_tag}, seed=cfg.seed)
    save_bundle(bundle, d, overwrite=True, extra_files={"ensemble": ENSEMBLE_FILE})
    summary = (f"simulated {ens.n_paths} {cfg.process.kind} paths on grid t0={g.t0} dt={g.dt} "
               f"n_steps={g.n_steps} with seed {cfg.seed} ({cfg.seed_source})")
    return CommandOutcome(0, summary, [str(d / ENSEMBLE_FILE), str(d / "manifest.json")])


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _input_ensemble(cfg: RunConfig, args) -> PathEnsemble:
    if cfg.process is not None:
        return simulate_ensemble(cfg.process, cfg.grid, cfg.n_paths, cfg.seed, cfg.substeps, threads=args.threads)
    inp = cfg.input
    if "bundle" in inp:
        d = _resolve(args.config, inp["bundle"])
        load_bundle(d)
        path = artifact_path(d, "ensemble")
        if path is None:
            raise RejectedInputError(f"bundle {d} holds no ensemble artifact")
        return read_ensemble(path)
    if "ensemble" in inp:
        return read_ensemble(_resolve(args.config, inp["ensemble"]))
    raise ConfigError("input: analyze needs 'bundle' or 'ensemble' input (series inputs go through build-ensemble)")


def _request(desc: str, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except (InsufficientDataError, NumericalError, NormalizationError) as exc:
        raise type(exc)(f"request {desc}: {exc}") from None


def _fits(grid, t: float, T: float, back: bool = False) -> bool:
    lo = t - T if back else t
    return lo >= grid.t0 - 1e-12 and t + T <= grid.t_end + 1e-12


def _verdict(z: float) -> str:
    if abs(z) <= AGREE_SE:
        return "agree"
    if abs(z) > DISAGREE_SE:
        return "disagree"
    return "inconclusive"


def cmd_analyze(args, out: _Output) -> CommandOutcome:
    cfg = _load_config(args)
    ens = _input_ensemble(cfg, args)
    cfg.check_grid(ens.grid)
    a = cfg.analysis
    grid = ens.grid
    lags = [float(T) for T in a.get("lags", [grid.dt])]
    base_times = [float(t) for t in a.get("base_times", [grid.t0])]
    wanted = set(a.get("estimators", ["sliding_msf", "histograms"]))
    stride = a.get("stride")
    alpha = float(a.get("alpha", 0.01))
    bins = a.get("bins")

    out.dir = _out_dir(args, cfg)
    d = out.prepare()
    bundle = ResultBundle(cfg.to_dict(), metadata=_metadata(cfg, "analyze"))
    bundle.metadata["n_paths"] = ens.n_paths
    comparison, hist_rows = [], []

    for name, power in (("sliding_increment_mean", 1), ("sliding_msf", 2)):
        if name not in wanted:
            continue
        fn = est.sliding_increment_mean if power == 1 else est.sliding_msf
        for T in lags:
            sl = _request(f"{name} T={T}", lambda: fn(ens, T, stride))
            bundle.add_report(name, sl.to_dict(), T=T, stride=stride if stride is not None else T)
            sl_hist = None
            if "histograms" in wanted:
                sl_hist = _request(f"sliding_histogram T={T}", lambda: dens.sliding_increment_histogram(ens, T, stride, bins))
            for t in base_times:
                if not _fits(grid, t, T):
                    continue
                en = _request(f"ensemble_moment t={t} T={T}", lambda: est.ensemble_moment(ens, t, T, power))
                bundle.add_report("ensemble_moment", en.to_dict(), t=t, T=T, power=power)
                joint = math.hypot(sl.std_error, en.std_error)
                diff = sl.estimate - en.estimate
                z = diff / joint if joint > 0 else (0.0 if diff == 0 else math.copysign(math.inf, diff))
                row = [name, T, t, sl.estimate, sl.std_error, sl.autocorr_lag1,
                       en.estimate, en.std_error, en.autocorr_lag1, diff, joint, z, _verdict(z)]
                if sl_hist is not None:
                    en_hist = _request(f"ensemble_histogram t={t} T={T}",
                                       lambda: dens.ensemble_increment_histogram(ens, t, T, bins))
                    ks = dens.ks_distance(sl_hist, en_hist, alpha)
                    bundle.add_report("ks_sliding_vs_ensemble", ks.to_dict(), t=t, T=T)
                    # the one-point density at t+T is the other candidate a sliding histogram may track
                    lv_hist = _request(f"one_point_histogram t={t + T}",
                                       lambda: dens.one_point_histogram(ens, t + T, bins))
                    ks1 = dens.ks_distance(sl_hist, lv_hist, alpha)
                    bundle.add_report("ks_sliding_vs_one_point", ks1.to_dict(), t=t + T, T=T)
                    row += [ks.statistic, ks.p_value, ks.passed, ks1.statistic, ks1.p_value, ks1.passed]
                    hist_rows += [("ensemble", t, T, *r) for r in en_hist.rows()]
                else:
                    row += [float("nan"), float("nan"), False] * 2
                comparison.append(row)
            if sl_hist is not None:
                hist_rows += [("sliding", float("nan"), T, *r) for r in sl_hist.rows()]

    corr_rows = []
    for name, fn in (("increment_autocorrelation", est.increment_autocorrelation),
                     ("volatility_correlation", est.volatility_correlation)):
        if name not in wanted:
            continue
        for T in lags:
            for t in base_times:
                if not _fits(grid, t, T, back=True):
                    continue
                r = _request(f"{name} t={t} T={T}", lambda: fn(ens, t, T))
                bundle.add_report(name, r.to_dict(), t=t, T=T)
                corr_rows.append((name, t, T, r.estimate, r.std_error, r.normalized, r.normalized_std_error))

    if "pair_correlation" in wanted:
        base = float(a.get("pair_base_t", grid.t0))
        pl = a.get("pair_lags") or [k * grid.dt for k in range(int(round((grid.t_end - base) / grid.dt)) + 1)]
        curve = _request("pair_correlation", lambda: est.pair_correlation(ens, pl, base))
        erg = est.ergodicity_diagnostic(curve)
        bundle.add_report("pair_correlation", {**curve.to_dict(), "ergodicity_diagnostic": erg}, base_t=base)
        bundle.add_table("pair_correlation", ["lag", "value", "std_error"],
                         list(zip(curve.lags.tolist(), curve.values.tolist(), curve.std_errors.tolist())))

    if "equal_time" in wanted:
        for t in base_times:
            rep = _request(f"equal_time t={t}", lambda: dens.equal_time_factorization_check(ens, t))
            bundle.add_report("equal_time", rep.to_dict(), t=t)

    if "histograms" in wanted:
        one_point = []
        for t in base_times:
            h = _request(f"one_point_histogram t={t}", lambda: dens.one_point_histogram(ens, t, bins))
            one_point += [(t, *r) for r in h.rows()]
        bundle.add_table("one_point_histograms", ["t", "bin_left", "bin_right", "mass"], one_point)
        bundle.add_table("increment_histograms", ["source", "t", "T", "bin_left", "bin_right", "mass"], hist_rows)

    if comparison:
        bundle.add_table("comparison", ["estimator", "T", "t", "sliding_estimate", "sliding_std_error",
                                        "sliding_autocorr_lag1", "ensemble_estimate", "ensemble_std_error",
                                        "ensemble_autocorr_lag1", "difference", "joint_std_error", "z",
                                        "verdict", "ks_statistic", "ks_p_value", "ks_passed",
                                        "ks_one_point_statistic", "ks_one_point_p_value",
                                        "ks_one_point_passed"], comparison)
    if corr_rows:
        bundle.add_table("correlations", ["estimator", "t", "T", "raw", "raw_std_error", "normalized",
                                          "normalized_std_error"], corr_rows)
    save_bundle(bundle, d, overwrite=True)
    flagged = sum(1 for r in comparison if r[12] == "disagree")
    summary = f"analyzed {ens.n_paths} paths: {len(bundle.reports)} reports, {flagged} sliding/ensemble disagreements"
    return CommandOutcome(0, summary, [str(d / "manifest.json")])


# ---------------------------------------------------------------------------
# build-ensemble
# ---------------------------------------------------------------------------


def cmd_build_ensemble(args, out: _Output) -> CommandOutcome:
    cfg = _load_config(args)
    if cfg.input is None or "series" not in cfg.input:
        raise ConfigError("input.series: build-ensemble needs a series file")
    inp = cfg.input
    series = load_series(_resolve(args.config, inp["series"]), value_kind=inp.get("value_kind", "level"))
    gaps = None
    if inp.get("regularize_dt") is not None:
        series, gaps = regularize(series, float(inp["regularize_dt"]))
    e = cfg.ensemble
    period = e.get("period")
    candidates = e.get("candidates") or []
    lag = int(e.get("lag", 1))
    if period is None and not candidates:
        raise ConfigError("ensemble: give 'period' or a non-empty 'candidates' list")

    out.dir = _out_dir(args, cfg)
    d = out.prepare()
    bundle = ResultBundle(cfg.to_dict(), metadata=_metadata(cfg, "build-ensemble"))
    if gaps is not None:
        bundle.add_report("regularize", gaps._asdict(), dt=float(inp["regularize_dt"]))

    if period is None:
        rep = _request("detect_periodicity",
                       lambda: detect_periodicity(series, candidates, T=lag, seed=cfg.seed, smooth=e.get("smooth")))
        bundle.add_report("detect_periodicity", rep.to_dict(), lag=lag)
        bundle.add_table("periodicity_scores", ["period", "score", "null_threshold"],
                         [(p, s, rep.null_threshold) for p, s in zip(rep.candidate_periods, rep.scores)])
        if rep.best_period is None:
            save_bundle(bundle, d, overwrite=True)
            raise NoPeriodError(
                f"no candidate period beats the null (scores {dict(zip(rep.candidate_periods, rep.scores))}, "
                f"threshold {rep.null_threshold:.4g}); report written to {d}"
            )
        period = rep.best_period
    else:
        period = int(period)
        bundle.add_report("fixed_period", {"period": period, "detector": "skipped"}, period=period)

    ens = segment_series(series, period, int(e.get("phase0", 0)))
    write_ensemble_binary(ens, d / ENSEMBLE_FILE)
    step = series.uniform_step()
    prof = _request("intraday_profile", lambda: intraday_profile(ens, lag * step))
    bundle.add_table("intraday_profile", ["phase", "msf", "std_error"], prof.rows())
    bnd = _request("boundary_correlation_check", lambda: boundary_correlation_check(ens, series))
    bundle.add_report("boundary_correlation_check", bnd.to_dict(), period=period)
    bundle.add_table("boundary_correlation", ["lag", "increment_corr", "increment_se", "level_corr", "level_se"],
                     list(zip(bnd.lags.tolist(), bnd.increment_corr.tolist(), bnd.increment_se.tolist(),
                              bnd.level_corr.tolist(), bnd.level_se.tolist())))
    bundle.add_report("segment_series", {"period": period, "n_runs": ens.n_paths,
                                         "phase0": int(e.get("phase0", 0))}, period=period)
    save_bundle(bundle, d, overwrite=True, extra_files={"ensemble": ENSEMBLE_FILE})
    return CommandOutcome(0, f"best_period={period}: {ens.n_paths} runs of {period} samples written to {d}",
                          [str(d / ENSEMBLE_FILE), str(d / "manifest.json")])


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _scalars(prefix: str, obj: Any):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _scalars(f"{prefix}.{k}" if prefix else k, v)
    elif isinstance(obj, (bool, int, float, str)) or obj is None:
        yield prefix, obj


def cmd_report(args, out: _Output) -> CommandOutcome:
    target = args.bundle or args.out
    if target is None:
        raise ConfigError("report needs a bundle directory (positional argument or --out)")
    d = FsPath(target)
    if not d.is_dir():
        raise RejectedInputError(f"bundle directory not found: {d}")
    bundle = load_bundle(d)
    rdir = d / "reports"
    out.dir = d
    out.touched = True
    rdir.mkdir(exist_ok=True)
    analyses = {k: v for k, v in sorted(bundle.reports.items()) if v["op"] != "simulate"}
    lines = [f"bundle: {d}", f"version: {bundle.metadata.get('version')}  seed: {bundle.metadata.get('seed')}"]
    lines += bundle.load_notes
    rows = []
    if not analyses:
        lines.append("no analyses")
    for key, rep in analyses.items():
        params = ", ".join(f"{k}={v}" for k, v in sorted(rep["params"].items()))
        lines.append(f"[{rep['op']}] {params}")
        for name, value in _scalars("", rep["result"]):
            rows.append((rep["op"], params, name, "" if value is None else value))
            if isinstance(value, float):
                lines.append(f"    {name} = {value:.6g}")
            elif not isinstance(value, str) or len(value) < 120:
                lines.append(f"    {name} = {value}")
    for name, tab in sorted(bundle.tables.items()):
        write_csv(rdir / f"{name}.csv", tab.columns, tab.rows)
        lines.append(f"table {name}: {len(tab.rows)} rows -> reports/{name}.csv")
    (rdir / "summary.txt").write_text("\n".join(lines) + "\n")
    with open(rdir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["operation", "parameters", "field", "value"])
        for op, params, name, value in rows:
            w.writerow([op, params, name, f"{value:.17g}" if isinstance(value, float) else value])
    summary = f"{len(analyses)} analyses" if analyses else "no analyses"
    return CommandOutcome(0, f"{summary}; report written to {rdir}", [str(rdir / "summary.txt")])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "build-ensemble": cmd_build_ensemble,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensemblab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (report: the bundle directory)")
        p.add_argument("--seed", type=int, help="master seed; overrides the config and ENSEMBLAB_SEED")
        p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty directory")
        if name == "report":
            p.add_argument("bundle", nargs="?", help="bundle directory")
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (NumericalError, InsufficientDataError, NormalizationError, NoPeriodError)):
        return 2
    if isinstance(exc, (RejectedInputError, IntegrityError, OSError)):
        return 1
    return 1


def run(argv: Sequence[str] | None = None) -> CommandOutcome:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        return CommandOutcome(1, "error: --threads must be >= 1")
    out = _Output(None, args.overwrite)
    try:
        return COMMANDS[args.command](args, out)
    except (EnsemblabError, OSError) as exc:
        code = exit_code_for(exc)
        msg = f"error: {exc}"
        if out.touched and out.dir is not None and out.dir.is_dir():
            (out.dir / FAILED_MARKER).write_text(msg + "\n")
        return CommandOutcome(code, msg)


def main(argv: Sequence[str] | None = None) -> int:
    outcome = run(argv)
    stream = sys.stdout if outcome.exit_code == 0 else sys.stderr
    print(outcome.summary, file=stream)
    for a in outcome.artifacts:
        print(f"  wrote {a}", file=stream)
    return outcome.exit_code
