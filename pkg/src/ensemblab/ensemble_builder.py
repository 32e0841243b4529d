"""Build a statistical ensemble from one long series with periodic statistics.

A single historic series whose intraday statistics repeat from one period
("day") to the next can be cut into per-period runs. Each run is rebased to
start at 0 so runs are comparable despite their different starting levels.
The boundary check measures how strongly consecutive runs remain coupled
through the shared day boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import InsufficientDataError, RejectedInputError
from .estimators import ensemble_moment
from .process_sim import PathEnsemble, TimeGrid, _seedseq

__all__ = [
    "BoundaryReport",
    "IntradayProfile",
    "LongSeries",
    "PeriodicityReport",
    "boundary_correlation_check",
    "detect_periodicity",
    "intraday_profile",
    "segment_series",
    "synthetic_periodic_series",
    "to_returns",
]

HARMONIC_TOLERANCE = 0.02
N_NULL = 99
NULL_QUANTILE = 0.95


@dataclass(eq=False)
class LongSeries:
    """A single observed series on strictly increasing timestamps."""

    timestamps: np.ndarray
    values: np.ndarray
    value_kind: str = "level"

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=float)
        vs = np.asarray(self.values, dtype=float)
        if ts.ndim != 1 or vs.ndim != 1 or ts.size != vs.size:
            raise RejectedInputError(f"timestamps ({ts.size}) and values ({vs.size}) must be 1-d of equal length")
        if self.value_kind not in ("level", "price"):
            raise RejectedInputError(f"value_kind must be 'level' or 'price', got {self.value_kind!r}")
        if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(vs))):
            raise RejectedInputError("series contains non-finite timestamps or values")
        bad = np.flatnonzero(np.diff(ts) <= 0)
        if bad.size:
            raise RejectedInputError(f"timestamps must be strictly increasing; violated at index {int(bad[0]) + 1}")
        if self.value_kind == "price" and np.any(vs <= 0):
            raise RejectedInputError(f"prices must be > 0; violated at index {int(np.flatnonzero(vs <= 0)[0])}")
        self.timestamps, self.values = ts, vs

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LongSeries):
            return NotImplemented
        return (
            self.value_kind == other.value_kind
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
        )

    def uniform_step(self) -> float:
        """Sample spacing; raises if the timestamps are not on a uniform grid."""
        if self.values.size < 2:
            raise InsufficientDataError("a series needs at least 2 samples")
        d = np.diff(self.timestamps)
        step = float(np.median(d))
        if np.max(np.abs(d - step)) > 1e-9 * max(abs(step), 1.0):
            raise RejectedInputError("series timestamps are irregular; regularize it to a uniform grid first")
        return step


def to_returns(series: LongSeries, T: int = 1) -> LongSeries:
    """Log returns ``ln(p(t+T) / p(t))`` at lag ``T`` samples."""
    if series.value_kind != "price":
        raise RejectedInputError("to_returns needs a price series")
    if int(T) != T or T < 1:
        raise RejectedInputError(f"lag T must be a positive integer number of samples, got {T}")
    if len(series) <= T:
        raise InsufficientDataError(f"series of length {len(series)} has no returns at lag {T}")
    logp = np.log(series.values)
    return LongSeries(series.timestamps[:-T], logp[T:] - logp[:-T], "level")


def _levels(series: LongSeries) -> np.ndarray:
    # price series are segmented in log space so that rebased increments are log returns
    return np.log(series.values) if series.value_kind == "price" else series.values


def segment_series(series: LongSeries, period: int, phase0: int = 0) -> PathEnsemble:
    """Cut the series into runs of ``period`` samples starting at ``phase0``.

    Each run is rebased to start at 0; a trailing partial run is dropped.
    The returned ensemble records ``period``, ``phase0`` and the run start
    indices in ``meta``.
    """
    if int(period) != period or period < 2:
        raise RejectedInputError(f"period must be an integer >= 2, got {period}")
    if int(phase0) != phase0 or not 0 <= phase0 < period:
        raise RejectedInputError(f"phase0 must lie in [0, period), got {phase0}")
    n = len(series)
    if n < 2 * period:
        raise InsufficientDataError(f"period {period} exceeds half the series length {n}")
    dt = series.uniform_step()
    x = _levels(series)
    n_seg = (n - phase0) // period
    if n_seg < 2:
        raise InsufficientDataError(f"only {n_seg} complete segment(s) of length {period} after phase0={phase0}")
    starts = phase0 + period * np.arange(n_seg)
    runs = x[phase0 : phase0 + n_seg * period].reshape(n_seg, period)
    runs = runs - runs[:, :1]
    meta = {"period": int(period), "phase0": int(phase0), "starts": starts.tolist(), "value_kind": series.value_kind}
    return PathEnsemble(TimeGrid(0.0, dt, period - 1), runs, seed_tag="segmented", meta=meta)


def unsegment(ensemble: PathEnsemble, series: LongSeries) -> np.ndarray:
    """Undo the rebase: original levels at the indices covered by the runs."""
    starts = np.asarray(ensemble.meta["starts"])
    return ensemble.values + _levels(series)[starts][:, None]


# ---------------------------------------------------------------------------
# Periodicity
# ---------------------------------------------------------------------------


@dataclass
class PeriodicityReport:
    candidate_periods: list[int]
    scores: list[float]
    null_threshold: float
    best_period: int | None
    profile: np.ndarray | None = None
    lag: int = 1
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "candidate_periods": list(self.candidate_periods),
            "scores": list(self.scores),
            "null_threshold": self.null_threshold,
            "best_period": self.best_period,
            "profile": None if self.profile is None else self.profile.tolist(),
            "lag": self.lag,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PeriodicityReport":
        prof = d.get("profile")
        return cls(
            [int(p) for p in d["candidate_periods"]],
            [float(s) for s in d["scores"]],
            float(d["null_threshold"]),
            None if d.get("best_period") is None else int(d["best_period"]),
            None if prof is None else np.asarray(prof, dtype=float),
            int(d.get("lag", 1)),
            str(d.get("notes", "")),
        )


def _segment_profiles(x: np.ndarray, period: int, lag: int, smooth: int) -> np.ndarray:
    """Per-segment squared-increment profiles, block-averaged over ``smooth`` phases."""
    n_seg = x.size // period
    seg = x[: n_seg * period].reshape(n_seg, period)
    sq = (seg[:, lag:] - seg[:, :-lag]) ** 2
    n_blk = sq.shape[1] // smooth
    return sq[:, : n_blk * smooth].reshape(n_seg, n_blk, smooth).mean(axis=2)


def _mean_pairwise_corr(profiles: np.ndarray) -> float:
    c = profiles - profiles.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.sum(c * c, axis=1))
    ok = norm > 0
    c = c[ok] / norm[ok, None]
    m = c.shape[0]
    if m < 2:
        return 0.0
    s = c.sum(axis=0)
    # sum over i != j of <c_i, c_j> = |sum c|^2 - sum |c_i|^2
    return float((s @ s - m) / (m * (m - 1)))


def _score(profiles: np.ndarray) -> float:
    return min(1.0, max(0.0, _mean_pairwise_corr(profiles)))


def detect_periodicity(
    series: LongSeries,
    candidates: Sequence[int],
    T: int = 1,
    seed: int = 0,
    smooth: int | None = None,
) -> PeriodicityReport:
    """Pick the period whose per-phase MSF profile repeats best across segments.

    For each candidate ``P`` the series is cut into segments of ``P``
    samples, each segment's squared lag-``T`` increments are block-averaged
    over ``smooth`` phases, and the score is the mean pairwise correlation of
    these profiles, clamped to ``[0, 1]``.

    The null distribution rolls every segment profile by an independent
    random phase (destroying cross-segment alignment while keeping each
    segment's content) and records the maximum score over candidates; a
    period is accepted only above the 95th percentile of 99 such draws.
    Among accepted periods, the smallest one within 2% of the best score
    wins, so a fundamental beats its harmonics.
    """
    cands = [int(c) for c in candidates]
    if not cands:
        raise RejectedInputError("detect_periodicity needs at least one candidate period")
    if int(T) != T or T < 1:
        raise RejectedInputError(f"lag T must be a positive integer, got {T}")
    n = len(series)
    x = _levels(series)
    series.uniform_step()
    for p in cands:
        if p <= T + 1:
            raise RejectedInputError(f"candidate period {p} must exceed lag {T} + 1")
        if p > n // 4:
            raise RejectedInputError(f"candidate period {p} exceeds a quarter of the series length {n}")
    if smooth is None:
        smooth = max(1, min(cands) // 24)
    profiles = {p: _segment_profiles(x, p, T, smooth) for p in cands}
    scores = [_score(profiles[p]) for p in cands]

    rng = np.random.default_rng(seed)
    null_max = np.empty(N_NULL)
    for r in range(N_NULL):
        best = 0.0
        for p in cands:
            prof = profiles[p]
            n_seg, n_blk = prof.shape
            shifts = rng.integers(0, n_blk, n_seg)
            idx = (np.arange(n_blk)[None, :] + shifts[:, None]) % n_blk
            best = max(best, _score(np.take_along_axis(prof, idx, axis=1)))
        null_max[r] = best
    threshold = float(np.quantile(null_max, NULL_QUANTILE))

    accepted = [(p, s) for p, s in zip(cands, scores) if s > threshold]
    notes = []
    best_period = None
    if accepted:
        top = max(s for _, s in accepted)
        best_period = min(p for p, s in accepted if s >= top * (1 - HARMONIC_TOLERANCE))
        others = sorted(p for p, _ in accepted if p != best_period)
        if others:
            notes.append(f"also above null: {others}")
    else:
        notes.append("no candidate period beats the phase-scrambled null")
    profile = None
    if best_period is not None:
        profile = intraday_profile(segment_series(series, best_period), T * series.uniform_step()).msf
    return PeriodicityReport(cands, scores, threshold, best_period, profile, int(T), "; ".join(notes))


# ---------------------------------------------------------------------------
# Profile and boundary diagnostics
# ---------------------------------------------------------------------------


@dataclass
class IntradayProfile:
    phases: np.ndarray
    msf: np.ndarray
    std_error: np.ndarray
    lag: float

    def to_dict(self) -> dict:
        return {"phases": self.phases.tolist(), "msf": self.msf.tolist(),
                "std_error": self.std_error.tolist(), "lag": self.lag}

    def rows(self) -> list[tuple[int, float, float]]:
        return [(int(p), float(m), float(s)) for p, m, s in zip(self.phases, self.msf, self.std_error)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "msf", "std_error"])
            for p, m, s in self.rows():
                w.writerow([p, f"{m:.17g}", f"{s:.17g}"])


def intraday_profile(ensemble: PathEnsemble, T: float) -> IntradayProfile:
    """Ensemble mean square fluctuation at lag ``T`` for every phase of the period."""
    if ensemble.n_paths < 2:
        raise InsufficientDataError(f"intraday profile needs at least 2 runs, got {ensemble.n_paths}")
    grid = ensemble.grid
    k = grid.steps(T, "T")
    if k < 1 or k > grid.n_steps:
        raise RejectedInputError(f"lag T={T} does not fit inside one run")
    phases = np.arange(grid.n_steps - k + 1)
    msf, se = [], []
    for ph in phases:
        rep = ensemble_moment(ensemble, grid.t0 + ph * grid.dt, T, power=2)
        msf.append(rep.estimate)
        se.append(rep.std_error)
    return IntradayProfile(phases, np.array(msf), np.array(se), float(T))


def _corr_with_se(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    n = a.size
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0, 0.0
    r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return r, float((1 - r * r) / math.sqrt(max(n - 1, 1)))


@dataclass
class BoundaryReport:
    """Cross-boundary dependence between consecutive runs.

    ``boundary_corr`` correlates the first return of run ``n`` with the last
    return of run ``n-1`` (the return ending at the boundary). For each lag
    ``L``, ``increment_corr[L]`` correlates the rebased level of run ``n`` at
    phase ``L`` with that last return, and ``level_corr[L]`` correlates the
    raw levels on both sides of the boundary.
    """

    n_pairs: int
    boundary_corr: float
    boundary_se: float
    lags: np.ndarray
    increment_corr: np.ndarray
    increment_se: np.ndarray
    level_corr: np.ndarray
    level_se: np.ndarray
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "boundary_corr": self.boundary_corr,
            "boundary_se": self.boundary_se,
            "lags": self.lags.tolist(),
            "increment_corr": self.increment_corr.tolist(),
            "increment_se": self.increment_se.tolist(),
            "level_corr": self.level_corr.tolist(),
            "level_se": self.level_se.tolist(),
            "notes": self.notes,
        }


def boundary_correlation_check(ensemble: PathEnsemble, original: LongSeries) -> BoundaryReport:
    """Measure how consecutive runs stay coupled across the segment boundary.

    This is a correlation proxy for the decay of the cross-boundary transition
    density; it does not establish that decay.
    """
    meta = ensemble.meta
    if "starts" not in meta or "period" not in meta:
        raise RejectedInputError("ensemble was not produced by segment_series (missing segmentation metadata)")
    starts = np.asarray(meta["starts"], dtype=int)
    period = int(meta["period"])
    if starts.size < 3:
        raise InsufficientDataError(f"boundary check needs at least 3 segments, got {starts.size}")
    x = _levels(original)
    if starts[-1] + period > x.size or not np.allclose(unsegment(ensemble, original), x[starts[:, None] + np.arange(period)]):
        raise RejectedInputError("ensemble does not match the segmentation of the original series")
    nxt = starts[1:]
    last_ret = x[nxt] - x[nxt - 1]
    first_ret = x[nxt + 1] - x[nxt]
    r0, se0 = _corr_with_se(first_ret, last_ret)
    lags = np.arange(1, max(1, period // 4) + 1)
    inc, inc_se, lev, lev_se = [], [], [], []
    for L in lags:
        rebased = x[nxt + L] - x[nxt]
        r, s = _corr_with_se(rebased, last_ret)
        inc.append(r)
        inc_se.append(s)
        r, s = _corr_with_se(x[nxt + L], x[nxt - 1])
        lev.append(r)
        lev_se.append(s)
    notes = "correlation proxy only; says nothing definitive about the decay of the transition density"
    return BoundaryReport(int(nxt.size), r0, se0, lags, np.array(inc), np.array(inc_se), np.array(lev), np.array(lev_se), notes)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def synthetic_periodic_series(
    n_days: int,
    period: int,
    vol_ratio: float = 4.0,
    seed: int = 0,
    base_vol: float = 1.0,
    dt: float = 1.0,
) -> LongSeries:
    """Random walk whose step volatility is ``vol_ratio * base_vol`` in the first half of each period.

    ``vol_ratio = 1`` gives a homogeneous Wiener walk.
    """
    if n_days < 1 or period < 2 or vol_ratio <= 0 or base_vol <= 0:
        raise RejectedInputError("synthetic series needs n_days >= 1, period >= 2 and positive volatilities")
    rng = np.random.Generator(np.random.PCG64(_seedseq(seed)))
    n = n_days * period
    phase = np.arange(n) % period
    vol = np.where(phase < period // 2, vol_ratio * base_vol, base_vol)
    steps = vol * math.sqrt(dt) * rng.standard_normal(n)
    values = np.concatenate([[0.0], np.cumsum(steps)])[:n]
    return LongSeries(dt * np.arange(n), values, "level")
