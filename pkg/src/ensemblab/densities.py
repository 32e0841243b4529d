"""Empirical densities from sliding windows and from ensembles, and their comparison.

Histograms are normalized to unit integral over the in-range samples.
Samples outside the bin range are counted in two overflow counters; more
than :data:`MAX_OVERFLOW` of the mass there is an error rather than a silent
clip. Raw samples are retained (up to :data:`MAX_RETAINED`) so that
:func:`ks_distance` can run the exact two-sample test.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, NormalizationError, RejectedInputError
from .estimators import window_increments
from .process_sim import PathEnsemble

__all__ = [
    "EmpiricalDensity",
    "EqualTimeReport",
    "JointDensity2D",
    "KSResult",
    "ensemble_increment_histogram",
    "equal_time_factorization_check",
    "fd_edges",
    "ks_distance",
    "one_point_histogram",
    "sliding_increment_histogram",
    "two_point_increment_histogram",
]

LABELS = ("increment_sliding", "increment_ensemble", "one_point", "joint_2pt")
MAX_OVERFLOW = 1e-3
MAX_RETAINED = 1_000_000
MAX_BINS = 10_000
JOINT_MAX_BINS = 25
MIN_EXPECTED_PAIRS = 5


def fd_edges(*samples: np.ndarray, max_bins: int = MAX_BINS) -> np.ndarray:
    """Freedman-Diaconis bin edges for the pooled samples.

    Sharing one set of edges between densities that will be compared keeps
    binning from confounding the comparison.
    """
    pooled = np.concatenate([np.ravel(np.asarray(s, dtype=float)) for s in samples])
    if pooled.size == 0:
        raise InsufficientDataError("cannot choose bins for an empty sample")
    # width computed here so a tiny IQR next to a far outlier cannot request an unbounded bin count
    q25, q75 = np.percentile(pooled, [25, 75])
    width = 2.0 * (q75 - q25) / np.cbrt(pooled.size)
    span = float(np.ptp(pooled))
    n_bins = 1 if width <= 0 or span == 0 else int(min(max_bins, math.ceil(span / width)))
    return np.histogram_bin_edges(pooled, bins=max(n_bins, 1))


def _resolve_edges(bins, *samples) -> np.ndarray:
    if bins is None:
        return fd_edges(*samples)
    if np.isscalar(bins):
        if int(bins) != bins or bins < 1:
            raise RejectedInputError(f"bin count must be a positive integer, got {bins}")
        pooled = np.concatenate([np.ravel(s) for s in samples])
        return np.histogram_bin_edges(pooled, bins=int(bins))
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0) or not np.all(np.isfinite(edges)):
        raise RejectedInputError("bin edges must be a finite, strictly increasing sequence of length >= 2")
    return edges


@dataclass(eq=False)
class EmpiricalDensity:
    """Normalized histogram ``mass`` on ``bin_edges`` (``sum(mass * width) == 1``)."""

    bin_edges: np.ndarray
    mass: np.ndarray
    n_samples: int
    label: str
    overflow_low: int = 0
    overflow_high: int = 0
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.mass * self.widths))

    def cdf_at(self, x: np.ndarray) -> np.ndarray:
        """Piecewise-linear CDF of the binned density (mass uniform within bins)."""
        cum = np.concatenate([[0.0], np.cumsum(self.mass * self.widths)])
        return np.interp(x, self.bin_edges, cum, left=0.0, right=1.0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmpiricalDensity):
            return NotImplemented
        return (
            self.label == other.label
            and self.n_samples == other.n_samples
            and (self.overflow_low, self.overflow_high) == (other.overflow_low, other.overflow_high)
            and np.array_equal(self.bin_edges, other.bin_edges)
            and np.array_equal(self.mass, other.mass)
        )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_samples": self.n_samples,
            "bin_edges": self.bin_edges.tolist(),
            "mass": self.mass.tolist(),
            "overflow_low": self.overflow_low,
            "overflow_high": self.overflow_high,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EmpiricalDensity":
        return cls(
            np.asarray(d["bin_edges"], dtype=float),
            np.asarray(d["mass"], dtype=float),
            int(d["n_samples"]),
            str(d["label"]),
            int(d.get("overflow_low", 0)),
            int(d.get("overflow_high", 0)),
        )

    def rows(self) -> list[tuple[float, float, float]]:
        e = self.bin_edges
        return [(float(e[i]), float(e[i + 1]), float(m)) for i, m in enumerate(self.mass)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "mass"])
            for row in self.rows():
                w.writerow([f"{v:.17g}" for v in row])


def _density(samples: np.ndarray, bins, label: str) -> EmpiricalDensity:
    x = np.ravel(np.asarray(samples, dtype=float))
    if x.size == 0:
        raise InsufficientDataError(f"no samples for {label} histogram")
    edges = _resolve_edges(bins, x)
    lo = int(np.count_nonzero(x < edges[0]))
    hi = int(np.count_nonzero(x > edges[-1]))
    counts, _ = np.histogram(x, bins=edges)
    n_in = int(counts.sum())
    if n_in == 0 or (lo + hi) > MAX_OVERFLOW * x.size:
        raise NormalizationError(
            f"{label} histogram: {lo + hi} of {x.size} samples fall outside "
            f"[{edges[0]:.6g}, {edges[-1]:.6g}] (limit {MAX_OVERFLOW:.1%})"
        )
    with np.errstate(over="ignore"):
        mass = counts / (n_in * np.diff(edges))
    if not np.all(np.isfinite(mass)):
        raise NormalizationError(f"{label} histogram: bins too narrow for a finite density (span {np.ptp(edges):.3g})")
    kept = x.copy() if x.size <= MAX_RETAINED else None
    return EmpiricalDensity(edges, mass, int(x.size), label, lo, hi, kept)


def sliding_increment_histogram(path_or_ensemble, T: float, stride: float | None = None, bins=None) -> EmpiricalDensity:
    """Histogram of ``x(t, T)`` over sliding-window starts along a path.

    An ensemble pools the windows of all its runs.
    """
    z, _ = window_increments(path_or_ensemble, T, stride)
    if z.size == 0:
        raise InsufficientDataError(f"no complete window of length T={T} fits on the path")
    return _density(z, bins, "increment_sliding")


def _ensemble(ensemble) -> PathEnsemble:
    if not isinstance(ensemble, PathEnsemble):
        raise RejectedInputError(f"expected a PathEnsemble, got {type(ensemble).__name__}")
    return ensemble


def ensemble_increment_samples(ensemble: PathEnsemble, t: float, T: float) -> np.ndarray:
    ensemble = _ensemble(ensemble)
    i = ensemble.grid.index(t, "t")
    j = ensemble.grid.index(t + T, "t+T")
    if j <= i:
        raise RejectedInputError(f"lag T must be positive, got {T}")
    return ensemble.values[:, j] - ensemble.values[:, i]


def ensemble_increment_histogram(ensemble: PathEnsemble, t: float, T: float, bins=None) -> EmpiricalDensity:
    """Cross-run histogram of ``x(t, T)`` at a fixed ``t`` (one sample per run)."""
    return _density(ensemble_increment_samples(ensemble, t, T), bins, "increment_ensemble")


def one_point_histogram(ensemble: PathEnsemble, t: float, bins=None) -> EmpiricalDensity:
    """Cross-run histogram of the levels ``x_k(t)``."""
    return _density(_ensemble(ensemble).at(t), bins, "one_point")


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov
# ---------------------------------------------------------------------------


@dataclass
class KSResult:
    statistic: float
    p_value: float
    critical_value: float
    alpha: float
    passed: bool
    method: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ks_critical(alpha: float, n: int, m: int) -> float:
    return math.sqrt(-math.log(alpha / 2) / 2) * math.sqrt((n + m) / (n * m))


def ks_distance(a: EmpiricalDensity, b: EmpiricalDensity, alpha: float = 0.01) -> KSResult:
    """Two-sample Kolmogorov-Smirnov comparison of two densities.

    Uses the exact sample-level statistic when both densities kept their raw
    samples. Otherwise compares the binned CDFs; binning can only shrink the
    gap, so the asymptotic critical value is conservative there.
    """
    for d in (a, b):
        if not isinstance(d, EmpiricalDensity) or d.n_samples < 1:
            raise RejectedInputError("ks_distance needs two non-empty EmpiricalDensity objects")
    if not 0 < alpha < 1:
        raise RejectedInputError(f"alpha must lie in (0, 1), got {alpha}")
    n, m = a.n_samples, b.n_samples
    crit = _ks_critical(alpha, n, m)
    if a.samples is not None and b.samples is not None:
        res = stats.ks_2samp(a.samples, b.samples)
        stat, p = float(res.statistic), float(res.pvalue)
        return KSResult(stat, p, crit, alpha, p >= alpha, "sample")
    knots = np.union1d(a.bin_edges, b.bin_edges)
    stat = float(np.max(np.abs(a.cdf_at(knots) - b.cdf_at(knots))))
    p = float(stats.kstwobign.sf(stat * math.sqrt(n * m / (n + m))))
    return KSResult(stat, p, crit, alpha, stat <= crit, "binned")


# ---------------------------------------------------------------------------
# Two-point increment density
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class JointDensity2D:
    """Joint histogram of ``(x(t1, T), x(t2, T))`` across runs.

    ``factorization_score`` is the total-variation distance between the
    joint bin probabilities and the product of their marginals;
    ``threshold`` is the ``1 - alpha`` quantile of that score under a
    bootstrap of the product-of-marginals null.
    """

    bin_edges_z1: np.ndarray
    bin_edges_z2: np.ndarray
    mass: np.ndarray
    n_samples: int
    window1: tuple[float, float]
    window2: tuple[float, float]
    factorization_score: float
    threshold: float
    p_value: float
    overlapping: bool
    notes: str = ""

    @property
    def total_mass(self) -> float:
        area = np.outer(np.diff(self.bin_edges_z1), np.diff(self.bin_edges_z2))
        return float(np.sum(self.mass * area))

    @property
    def factorizes(self) -> bool:
        return self.factorization_score <= self.threshold

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, JointDensity2D):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        return {
            "bin_edges_z1": self.bin_edges_z1.tolist(),
            "bin_edges_z2": self.bin_edges_z2.tolist(),
            "mass": self.mass.tolist(),
            "n_samples": self.n_samples,
            "window1": list(self.window1),
            "window2": list(self.window2),
            "factorization_score": self.factorization_score,
            "threshold": self.threshold,
            "p_value": self.p_value,
            "overlapping": self.overlapping,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JointDensity2D":
        return cls(
            np.asarray(d["bin_edges_z1"], dtype=float),
            np.asarray(d["bin_edges_z2"], dtype=float),
            np.asarray(d["mass"], dtype=float),
            int(d["n_samples"]),
            tuple(d["window1"]),
            tuple(d["window2"]),
            float(d["factorization_score"]),
            float(d["threshold"]),
            float(d["p_value"]),
            bool(d["overlapping"]),
            str(d.get("notes", "")),
        )

    def rows(self) -> list[tuple[int, int, float]]:
        return [(i, j, float(self.mass[i, j])) for i in range(self.mass.shape[0]) for j in range(self.mass.shape[1])]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z1_bin", "z2_bin", "mass"])
            for i, j, v in self.rows():
                w.writerow([i, j, f"{v:.17g}"])


def _bin_index(x: np.ndarray, edges: np.ndarray, what: str) -> np.ndarray:
    out = (x < edges[0]) | (x > edges[-1])
    if np.count_nonzero(out) > MAX_OVERFLOW * x.size:
        raise NormalizationError(f"{what}: {np.count_nonzero(out)} of {x.size} samples outside the bin range")
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, edges.size - 2)
    return idx[~out]


def _tv_from_codes(c1: np.ndarray, c2: np.ndarray, b1: int, b2: int) -> float:
    n = c1.size
    joint = np.bincount(c1 * b2 + c2, minlength=b1 * b2).reshape(b1, b2) / n
    prod = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    return 0.5 * float(np.abs(joint - prod).sum())


def two_point_increment_histogram(
    ensemble: PathEnsemble,
    t1: float,
    t2: float,
    T: float,
    bins=None,
    n_boot: int = 199,
    alpha: float = 0.01,
    seed: int = 0,
) -> JointDensity2D:
    """Joint density of increments over two windows, with a factorization test.

    Both axes share one set of edges (by default equal-width bins over the
    pooled range, at most :data:`JOINT_MAX_BINS`). Overlapping windows are
    allowed and flagged.
    """
    z1 = ensemble_increment_samples(ensemble, t1, T)
    z2 = ensemble_increment_samples(ensemble, t2, T)
    if bins is None:
        pooled = np.concatenate([z1, z2])
        n_fd = fd_edges(pooled).size - 1
        edges = np.histogram_bin_edges(pooled, bins=max(1, min(n_fd, JOINT_MAX_BINS)))
    else:
        edges = _resolve_edges(bins, z1, z2)
    keep = (z1 >= edges[0]) & (z1 <= edges[-1]) & (z2 >= edges[0]) & (z2 <= edges[-1])
    if np.count_nonzero(~keep) > MAX_OVERFLOW * z1.size:
        raise NormalizationError(f"joint histogram: {np.count_nonzero(~keep)} of {z1.size} pairs outside the bin range")
    c1 = _bin_index(z1[keep], edges, "z1")
    c2 = _bin_index(z2[keep], edges, "z2")
    b = edges.size - 1
    n = c1.size
    counts = np.bincount(c1 * b + c2, minlength=b * b).reshape(b, b)
    widths = np.diff(edges)
    mass = counts / (n * np.outer(widths, widths))
    score = _tv_from_codes(c1, c2, b, b)
    rng = np.random.default_rng(seed)
    null = np.empty(n_boot)
    for r in range(n_boot):
        null[r] = _tv_from_codes(c1[rng.integers(0, n, n)], c2[rng.integers(0, n, n)], b, b)
    threshold = float(np.quantile(null, 1.0 - alpha))
    p_value = float((1 + np.count_nonzero(null >= score)) / (n_boot + 1))
    overlapping = bool(t1 != t2 and abs(t2 - t1) < T)
    notes = []
    if overlapping:
        notes.append("overlapping windows: increments share a sub-interval")
    if t1 == t2:
        notes.append("identical windows: joint mass lies on the diagonal")
    return JointDensity2D(
        edges, edges.copy(), mass, int(n), (float(t1), float(T)), (float(t2), float(T)),
        score, threshold, p_value, overlapping, "; ".join(notes),
    )


# ---------------------------------------------------------------------------
# Equal-time factorization
# ---------------------------------------------------------------------------


@dataclass
class EqualTimeReport:
    """Outcome of :func:`equal_time_factorization_check`.

    ``single_run_offdiag_mass`` is the off-diagonal mass of the joint
    histogram of ``(x_k(t), x_k(t))``; it is zero by construction.
    ``cross_covariances[a, b]`` estimates ``Cov(1[x_k(t) in A_a], 1[x_{k+1}(t) in A_b])``
    over neighbouring runs; ``max_abs_z`` is the largest ``|cov| / se`` over
    disjoint bin pairs with at least :data:`MIN_EXPECTED_PAIRS` expected
    co-occurrences (below that the normal approximation is not usable).
    """

    t: float
    n_paths: int
    bin_edges: np.ndarray
    single_run_offdiag_mass: float
    cross_covariances: np.ndarray
    cross_std_errors: np.ndarray
    max_abs_z: float
    n_pairs_tested: int
    z_threshold: float
    broken: bool
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "n_paths": self.n_paths,
            "bin_edges": self.bin_edges.tolist(),
            "single_run_offdiag_mass": self.single_run_offdiag_mass,
            "max_abs_z": self.max_abs_z,
            "n_pairs_tested": self.n_pairs_tested,
            "z_threshold": self.z_threshold,
            "broken": self.broken,
            "notes": self.notes,
        }


def equal_time_factorization_check(
    ensemble: PathEnsemble, t: float, bins=10, z_threshold: float = 4.0
) -> EqualTimeReport:
    """Check the two facts that let ensemble histograms converge at fixed ``t``.

    Within a run, two equal-time indicators of disjoint bins never fire
    together. Across independent runs, indicators of disjoint bins are
    uncorrelated. An ensemble whose runs are not independent realizations
    (duplicated or identical paths) is reported as ``broken``.

    An integer ``bins`` gives equal-probability bins (sample quantiles), so
    every bin pair has enough expected co-occurrences for a z-test.
    """
    ensemble = _ensemble(ensemble)
    if ensemble.n_paths < 3:
        raise InsufficientDataError("equal-time check needs at least 3 runs")
    x = ensemble.at(t)
    if np.isscalar(bins):
        if int(bins) != bins or bins < 1:
            raise RejectedInputError(f"bin count must be a positive integer, got {bins}")
        edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, int(bins) + 1)))
        if edges.size < 2:
            edges = np.array([x[0] - 0.5, x[0] + 0.5])
    else:
        edges = _resolve_edges(bins, x)
    b = edges.size - 1
    codes = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, b - 1)
    out = (x < edges[0]) | (x > edges[-1])
    if np.count_nonzero(out) > MAX_OVERFLOW * x.size:
        raise NormalizationError("equal-time check: samples outside the bin range")
    joint_same = np.bincount(codes * b + codes, minlength=b * b).reshape(b, b)
    offdiag = float((joint_same.sum() - np.trace(joint_same)) / joint_same.sum())

    ind = np.zeros((x.size, b))
    ind[np.arange(x.size), codes] = 1.0
    ia, ib = ind[:-1], ind[1:]
    n_pairs = ia.shape[0]
    ac = ia - ia.mean(axis=0)
    bc = ib - ib.mean(axis=0)
    cov = ac.T @ bc / n_pairs
    # standard error under independence: Var(1_A 1_B) = p_A (1 - p_A) p_B (1 - p_B); the plug-in
    # second moment collapses for rare bins with no observed co-occurrence
    se = np.sqrt(np.outer(ia.var(axis=0), ib.var(axis=0)) / n_pairs)
    p = ind.mean(axis=0)
    mask = (np.outer(p, p) * n_pairs >= MIN_EXPECTED_PAIRS) & ~np.eye(b, dtype=bool)
    notes = []
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(cov) / se, np.where(np.abs(cov) > 0, np.inf, 0.0))
    max_z = float(z[mask].max()) if mask.any() else 0.0
    broken = bool(max_z > z_threshold)
    if np.ptp(x) == 0.0:
        broken = True
        notes.append("all runs coincide at t: no cross-run scatter, runs are not independent realizations")
    elif not mask.any():
        notes.append("no disjoint bin pair has enough expected co-occurrences to test")
    n_skipped = int(np.count_nonzero(~np.eye(b, dtype=bool)) - mask.sum())
    if n_skipped and np.ptp(x) > 0:
        notes.append(f"{n_skipped} sparse bin pairs skipped (expected co-occurrences < {MIN_EXPECTED_PAIRS})")
    if broken and max_z > z_threshold:
        notes.append(f"cross-run indicator covariance reaches {max_z:.1f} standard errors")
    return EqualTimeReport(
        float(t), int(x.size), edges, offdiag, cov, se, max_z, int(mask.sum()), z_threshold, broken, "; ".join(notes)
    )
