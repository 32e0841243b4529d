"""Sliding-window time averages, ensemble averages and correlation diagnostics.

Sliding estimators average a function of the increment ``x(t, T) = x(t+T) - x(t)``
over window starts ``t = t0, t0 + stride, ...`` along a path. Passing a
:class:`~ensemblab.process_sim.PathEnsemble` instead of a single path pools
the windows of every run (lag-1 autocorrelation is then measured within runs
only).

Ensemble estimators average across runs at a fixed strobe time, so their
summands are independent by construction.

Every report carries the naive i.i.d. standard error ``sd / sqrt(n)`` together
with the lag-1 autocorrelation of the averaged summands, so a caller can see
when the naive error bar is not trustworthy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .errors import InsufficientDataError, NumericalError, RejectedInputError
from .process_sim import Path, PathEnsemble, ProcessSpec, TimeGrid, _seedseq, simulate_block

__all__ = [
    "BACKWARD_CONVENTION",
    "CorrelationCurve",
    "EstimatorReport",
    "convergence_rate",
    "convergence_variances",
    "ensemble_moment",
    "ergodicity_diagnostic",
    "increment_autocorrelation",
    "pair_correlation",
    "sliding_increment_mean",
    "sliding_msf",
    "volatility_correlation",
    "window_increments",
]

BACKWARD_CONVENTION = "backward increment x(t,-T) taken as x(t) - x(t-T)"
OVERLAP_NOTE = "overlapping windows (stride < T): summands are correlated, i.i.d. standard error is optimistic"
CURVE_KINDS = ("pair_correlation", "increment_autocorr", "volatility_corr")
ESTIMATORS = ("sliding_increment_mean", "sliding_msf", "ensemble_moment")


@dataclass
class EstimatorReport:
    """Point estimate with its naive standard error and correlation diagnostics.

    ``normalized`` and ``normalized_std_error`` are only set by the
    correlation estimators, where ``estimate`` is the raw cross-path average.
    """

    estimate: float
    std_error: float
    n_samples: int
    autocorr_lag1: float
    notes: str = ""
    normalized: float | None = None
    normalized_std_error: float | None = None

    def to_dict(self) -> dict:
        d = {
            "estimate": self.estimate,
            "std_error": self.std_error,
            "n_samples": self.n_samples,
            "autocorr_lag1": self.autocorr_lag1,
            "notes": self.notes,
        }
        if self.normalized is not None:
            d["normalized"] = self.normalized
            d["normalized_std_error"] = self.normalized_std_error
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EstimatorReport":
        return cls(
            float(d["estimate"]),
            float(d["std_error"]),
            int(d["n_samples"]),
            float(d["autocorr_lag1"]),
            str(d.get("notes", "")),
            None if d.get("normalized") is None else float(d["normalized"]),
            None if d.get("normalized_std_error") is None else float(d["normalized_std_error"]),
        )


@dataclass
class CorrelationCurve:
    lags: np.ndarray
    values: np.ndarray
    kind: str
    std_errors: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        self.lags = np.asarray(self.lags, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in CURVE_KINDS:
            raise RejectedInputError(f"unknown curve kind {self.kind!r}")
        if self.lags.shape != self.values.shape or self.lags.ndim != 1:
            raise RejectedInputError("curve lags and values must be 1-d and of equal length")
        if self.lags.size > 1 and np.any(np.diff(self.lags) <= 0):
            raise RejectedInputError("curve lags must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("curve values must be finite")
        if self.std_errors is not None:
            self.std_errors = np.asarray(self.std_errors, dtype=float)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CorrelationCurve):
            return NotImplemented
        se_eq = (self.std_errors is None and other.std_errors is None) or (
            self.std_errors is not None
            and other.std_errors is not None
            and np.array_equal(self.std_errors, other.std_errors)
        )
        return (
            self.kind == other.kind
            and np.array_equal(self.lags, other.lags)
            and np.array_equal(self.values, other.values)
            and se_eq
        )

    def to_dict(self) -> dict:
        d = {"lags": self.lags.tolist(), "values": self.values.tolist(), "kind": self.kind}
        if self.std_errors is not None:
            d["std_errors"] = self.std_errors.tolist()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CorrelationCurve":
        return cls(d["lags"], d["values"], d["kind"], d.get("std_errors"))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lag", "value"])
            for lag, v in zip(self.lags, self.values):
                w.writerow([f"{lag:.17g}", f"{v:.17g}"])


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _lag1_autocorr(rows: np.ndarray) -> float:
    """Lag-1 autocorrelation pooled over rows; pairs never straddle two rows."""
    rows = np.atleast_2d(rows)
    if rows.shape[1] < 2 or rows.size < 3:
        return 0.0
    c = rows - rows.mean()
    den = float(np.sum(c * c))
    if den == 0.0:
        return 0.0
    num = float(np.sum(c[:, 1:] * c[:, :-1]))
    # normalise per pair so short rows are not penalised
    r = (num / (rows.shape[0] * (rows.shape[1] - 1))) / (den / rows.size)
    return float(min(1.0, max(-1.0, r)))


def _summary(summands: np.ndarray, notes: list[str], autocorr_rows: np.ndarray | None = None) -> EstimatorReport:
    flat = summands.ravel()
    n = flat.size
    est = float(np.mean(flat))
    se = float(np.std(flat, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    rows = summands if autocorr_rows is None else autocorr_rows
    r1 = _lag1_autocorr(rows)
    if n > 1 and se == 0.0:
        notes.append("degenerate: summands have zero variance")
    return EstimatorReport(est, se, n, r1, "; ".join(notes))


def _as_rows(path_or_ensemble) -> tuple[np.ndarray, TimeGrid]:
    if isinstance(path_or_ensemble, Path):
        return path_or_ensemble.values[None, :], path_or_ensemble.grid
    if isinstance(path_or_ensemble, PathEnsemble):
        return path_or_ensemble.values, path_or_ensemble.grid
    raise RejectedInputError(f"expected a Path or PathEnsemble, got {type(path_or_ensemble).__name__}")


def window_increments(path_or_ensemble, T: float, stride: float | None = None) -> tuple[np.ndarray, list[str]]:
    """Increments ``x(t, T)`` at window starts ``t0, t0 + stride, ...``.

    Returns an array of shape ``(n_paths, n_windows)`` and the notes that
    apply to this windowing (e.g. overlapping windows).
    """
    values, grid = _as_rows(path_or_ensemble)
    stride = T if stride is None else stride
    k = grid.steps(T, "T")
    s = grid.steps(stride, "stride")
    if k < 1:
        raise RejectedInputError(f"lag T must be positive, got {T}")
    if s < 1:
        raise RejectedInputError(f"stride must be positive, got {stride}")
    starts = np.arange(0, grid.n_steps - k + 1, s)
    notes = []
    if s < k:
        notes.append(OVERLAP_NOTE)
    if starts.size == 0:
        return np.empty((values.shape[0], 0)), notes
    return values[:, starts + k] - values[:, starts], notes


def _sliding(path_or_ensemble, T, stride, power) -> EstimatorReport:
    z, notes = window_increments(path_or_ensemble, T, stride)
    if z.shape[1] < 2:
        raise InsufficientDataError(
            f"sliding window needs at least 2 windows per path, got {z.shape[1]} (T={T}, stride={stride})"
        )
    return _summary(z**power, notes)


def sliding_increment_mean(path_or_ensemble, T: float, stride: float | None = None) -> EstimatorReport:
    """Time average of ``x(t, T)`` over sliding windows (``stride`` defaults to ``T``)."""
    return _sliding(path_or_ensemble, T, stride, 1)


def sliding_msf(path_or_ensemble, T: float, stride: float | None = None) -> EstimatorReport:
    """Time average of ``x(t, T)**2``: the sliding-window mean square fluctuation.

    ``autocorr_lag1`` is that of the squared increments, i.e. the volatility
    clustering that invalidates the naive standard error.
    """
    return _sliding(path_or_ensemble, T, stride, 2)


def _need_ensemble(ensemble, min_paths: int = 2) -> PathEnsemble:
    if not isinstance(ensemble, PathEnsemble):
        raise RejectedInputError(f"expected a PathEnsemble, got {type(ensemble).__name__}")
    if ensemble.n_paths < min_paths:
        raise InsufficientDataError(f"ensemble estimate needs at least {min_paths} paths, got {ensemble.n_paths}")
    return ensemble


def ensemble_moment(ensemble: PathEnsemble, t: float, T: float, power: int = 2) -> EstimatorReport:
    """Cross-path average of ``x(t, T)**power`` at fixed ``t``."""
    ensemble = _need_ensemble(ensemble)
    if power not in (1, 2):
        raise RejectedInputError(f"power must be 1 or 2, got {power}")
    grid = ensemble.grid
    i = grid.index(t, "t")
    j = grid.index(t + T, "t+T")
    if j <= i:
        raise RejectedInputError(f"lag T must be positive, got {T}")
    z = ensemble.values[:, j] - ensemble.values[:, i]
    return _summary(z**power, [], autocorr_rows=z[None, :] ** power)


def _fwd_bwd(ensemble: PathEnsemble, t: float, T: float) -> tuple[np.ndarray, np.ndarray]:
    ensemble = _need_ensemble(ensemble)
    grid = ensemble.grid
    i = grid.index(t, "t")
    k = grid.steps(T, "T")
    if k < 1:
        raise RejectedInputError(f"lag T must be positive, got {T}")
    if i - k < 0 or i + k > grid.n_steps:
        raise RejectedInputError(
            f"t-T and t+T must both lie on the grid: t={t}, T={T}, grid [{grid.t0}, {grid.t_end}]"
        )
    v = ensemble.values
    return v[:, i + k] - v[:, i], v[:, i] - v[:, i - k]


def _paired_report(prod: np.ndarray, scale: float, notes: list[str]) -> EstimatorReport:
    rep = _summary(prod, notes, autocorr_rows=prod[None, :])
    if scale > 0:
        rep.normalized = rep.estimate / scale
        rep.normalized_std_error = rep.std_error / scale
    else:
        rep.normalized = 0.0
        rep.normalized_std_error = 0.0
        rep.notes = "; ".join(filter(None, [rep.notes, "degenerate: zero increment variance, normalized set to 0"]))
    return rep


def increment_autocorrelation(ensemble: PathEnsemble, t: float, T: float) -> EstimatorReport:
    """Cross-path average of forward times backward increment around ``t``.

    ``estimate`` is the raw mean of ``x(t, T) * x(t, -T)``; ``normalized``
    divides by ``sqrt(var_fwd * var_bwd)``. See :data:`BACKWARD_CONVENTION`.
    """
    fwd, bwd = _fwd_bwd(ensemble, t, T)
    scale = math.sqrt(float(np.var(fwd)) * float(np.var(bwd)))
    return _paired_report(fwd * bwd, scale, [BACKWARD_CONVENTION])


def volatility_correlation(ensemble: PathEnsemble, t: float, T: float) -> EstimatorReport:
    """Covariance of squared backward and forward increments around ``t``.

    ``estimate`` is the raw covariance, ``normalized`` the correlation.
    """
    fwd, bwd = _fwd_bwd(ensemble, t, T)
    a, b = bwd**2, fwd**2
    prod = (a - a.mean()) * (b - b.mean())
    scale = math.sqrt(float(np.var(a)) * float(np.var(b)))
    return _paired_report(prod, scale, [BACKWARD_CONVENTION])


def pair_correlation(ensemble: PathEnsemble, lags: Sequence[float], base_t: float | None = None) -> CorrelationCurve:
    """Ensemble autocovariance ``R(T) = <dx(t) dx(t+T)>`` with means subtracted per time.

    ``base_t`` defaults to the first grid time.
    """
    ensemble = _need_ensemble(ensemble)
    grid = ensemble.grid
    base_t = grid.t0 if base_t is None else base_t
    lags = np.asarray(lags, dtype=float)
    if lags.ndim != 1 or lags.size == 0:
        raise RejectedInputError("pair_correlation needs a non-empty 1-d sequence of lags")
    if np.any(lags < 0):
        raise RejectedInputError("lags must be non-negative")
    i = grid.index(base_t, "base_t")
    x = ensemble.values[:, i]
    xc = x - x.mean()
    n = x.size
    vals, ses = [], []
    for lag in lags:
        j = grid.index(base_t + lag, "base_t+lag")
        y = ensemble.values[:, j]
        prod = xc * (y - y.mean())
        vals.append(float(np.mean(prod)))
        ses.append(float(np.std(prod, ddof=1) / math.sqrt(n)))
    return CorrelationCurve(lags, np.array(vals), "pair_correlation", np.array(ses))


def ergodicity_diagnostic(curve: CorrelationCurve) -> float:
    """Running mean ``(1/T) * integral_0^T R(s) ds`` at the largest lag.

    The integral is the trapezoid rule over the curve's lags. Values near 0
    support ergodicity of the mean; a flat ``R`` returns that constant.
    """
    if not isinstance(curve, CorrelationCurve):
        raise RejectedInputError("ergodicity_diagnostic expects a CorrelationCurve")
    if curve.kind != "pair_correlation":
        raise RejectedInputError(f"ergodicity_diagnostic needs a pair_correlation curve, got {curve.kind}")
    if curve.lags.size == 0:
        raise RejectedInputError("empty correlation curve")
    if curve.lags.size == 1:
        return float(curve.values[0])
    span = float(curve.lags[-1] - curve.lags[0])
    return float(trapezoid(curve.values, curve.lags) / span)


# ---------------------------------------------------------------------------
# convergence rate
# ---------------------------------------------------------------------------


def _child(root: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + tuple(key))


def convergence_variances(
    spec: ProcessSpec,
    estimator: str,
    T: float,
    n_grid: Sequence[int],
    master_seed,
    n_reps: int = 32,
    dt: float | None = None,
    substeps: int | None = None,
    power: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Replication variance of ``estimator`` at each sample size in ``n_grid``.

    For the sliding estimators, ``N`` is the number of non-overlapping windows
    (stride ``T``) along one path and replication ``r`` is path ``r`` of an
    ensemble keyed by ``(master_seed, i)``. For ``ensemble_moment``, ``N`` is
    the number of paths, evaluated at ``t0`` with lag ``T``.

    Returns ``(n_grid, variances)``.
    """
    if estimator not in ESTIMATORS:
        raise RejectedInputError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    n_grid = np.asarray(n_grid)
    if n_grid.ndim != 1 or n_grid.size < 4:
        raise RejectedInputError("n_grid needs at least 4 sample sizes")
    if np.any(n_grid < 2) or np.any(n_grid != np.round(n_grid)):
        raise RejectedInputError("sample sizes must be integers >= 2")
    if n_grid.max() < 100 * n_grid.min():
        raise RejectedInputError("n_grid must span at least two decades")
    if n_reps < 32:
        raise RejectedInputError(f"n_reps must be >= 32, got {n_reps}")
    root = _seedseq(master_seed)
    dt = T if dt is None else dt
    variances = []
    for i, n in enumerate(int(v) for v in n_grid):
        if estimator == "ensemble_moment":
            k = TimeGrid(0.0, dt, 1).steps(T, "T")
            grid = TimeGrid(0.0, dt, k)
            est = np.empty(n_reps)
            for r in range(n_reps):
                vals = simulate_block(spec, grid, _child(root, i, r), 0, n, substeps)
                z = vals[:, -1] - vals[:, 0]
                est[r] = np.mean(z**power)
        else:
            k = TimeGrid(0.0, dt, 1).steps(T, "T")
            grid = TimeGrid(0.0, dt, n * k)
            p = 1 if estimator == "sliding_increment_mean" else 2
            batch = max(1, min(n_reps, int(4e6 // grid.n_points)))
            est = np.empty(n_reps)
            seed_i = _child(root, i)
            for start in range(0, n_reps, batch):
                stop = min(start + batch, n_reps)
                vals = simulate_block(spec, grid, seed_i, start, stop, substeps)
                z = vals[:, k::k] - vals[:, : -k : k]
                est[start:stop] = np.mean(z**p, axis=1)
        variances.append(float(np.var(est, ddof=1)))
    return n_grid.astype(float), np.array(variances)


def convergence_rate(
    spec: ProcessSpec,
    estimator: str,
    T: float,
    n_grid: Sequence[int],
    master_seed,
    n_reps: int = 32,
    dt: float | None = None,
    substeps: int | None = None,
) -> float:
    """Slope of log(replication variance) against log(N).

    A slope near -1 is the law-of-large-numbers rate for uncorrelated
    summands; a shallower slope means the summands are correlated.
    """
    ns, var = convergence_variances(spec, estimator, T, n_grid, master_seed, n_reps, dt, substeps)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise NumericalError(f"degenerate convergence fit: replication variances {var.tolist()}")
    slope = float(np.polyfit(np.log(ns), np.log(var), 1)[0])
    if not math.isfinite(slope):
        raise NumericalError("degenerate convergence fit: non-finite slope")
    return slope
