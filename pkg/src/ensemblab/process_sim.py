"""Sample paths and ensembles for processes with known analytic structure.

Four families are supported:

* ``wiener``  -- Brownian motion with volatility ``sigma``.
* ``fbm``     -- fractional Brownian motion, sampled exactly from its
  Gaussian law (no discretization).
* ``ito``     -- drift-free diffusions ``dx = sqrt(D(x, t)) dW`` integrated by
  Euler-Maruyama on a refined grid. ``D`` is picked from a small registry.
* ``ou``      -- Ornstein-Uhlenbeck, sampled with its exact Gaussian
  transition.

Every generator is a pure function of ``(spec, grid, seed[, substeps])``.
Ensembles give path ``k`` its own stream derived from ``(master_seed, k)``,
so a path can be regenerated on its own and ensembles can be built in
parallel without changing a single bit of output.
"""

from __future__ import annotations

import functools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.linalg import toeplitz

from .errors import NumericalError, RejectedInputError

__all__ = [
    "DIFFUSIONS",
    "Path",
    "PathEnsemble",
    "ProcessSpec",
    "TimeGrid",
    "fbm_covariance",
    "path_seed",
    "simulate",
    "simulate_block",
    "simulate_ensemble",
    "simulate_fbm",
    "simulate_ito",
    "simulate_ou",
    "simulate_wiener",
]

KINDS = ("wiener", "fbm", "ito", "ou")
DEFAULT_SUBSTEPS = 50
# above this many steps the fGn Cholesky factor is too large; switch to circulant embedding
CHOLESKY_MAX_STEPS = 4096
_ELEMENTWISE_MAX = 256
_CHUNK = 4096
_GRID_RTOL = 1e-9


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform strobe times ``t0 + k*dt`` for ``k = 0..n_steps``."""

    t0: float = 0.0
    dt: float = 1.0
    n_steps: int = 1

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t0) and math.isfinite(self.dt)):
            raise RejectedInputError(f"grid t0 and dt must be finite, got t0={self.t0}, dt={self.dt}")
        if self.dt <= 0:
            raise RejectedInputError(f"grid dt must be > 0, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise RejectedInputError(f"grid n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_points)

    def steps(self, lag: float, name: str = "lag", scale: float = 0.0) -> int:
        """Express a time span as a whole number of grid steps.

        ``scale`` is the magnitude of the operands the span was computed
        from; it widens the tolerance to cover their rounding.
        """
        k = lag / self.dt
        n = int(round(k))
        tol = _GRID_RTOL * max(1.0, abs(k), scale / self.dt)
        if not math.isfinite(k) or abs(k - n) > tol:
            raise RejectedInputError(f"{name}={lag} is not a multiple of the grid step dt={self.dt}")
        return n

    def index(self, t: float, name: str = "t") -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid time."""
        n = self.steps(t - self.t0, name, scale=abs(self.t0))
        if n < 0 or n > self.n_steps:
            raise RejectedInputError(f"{name}={t} lies outside the grid [{self.t0}, {self.t_end}]")
        return n

    def to_dict(self) -> dict:
        return {"t0": self.t0, "dt": self.dt, "n_steps": self.n_steps}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TimeGrid":
        try:
            return cls(float(d.get("t0", 0.0)), float(d["dt"]), int(d["n_steps"]))
        except KeyError as exc:
            raise RejectedInputError(f"grid is missing field {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Process description
# ---------------------------------------------------------------------------


def _d_linear_x(x, t, p):
    return x


def _d_one_plus_abs_x(x, t, p):
    return 1.0 + np.abs(x)


def _d_scaling_h(x, t, p):
    H = p["hurst"]
    return t ** (2 * H - 1) * (1.0 + np.abs(x) / t**H)


def _d_exp_t(x, t, p):
    return np.full_like(x, np.exp(p["gamma"] * t))


# diffusion_id -> (D(x, t, params), default params)
DIFFUSIONS: dict[str, tuple[Callable[..., np.ndarray], dict[str, float]]] = {
    "linear_x": (_d_linear_x, {}),
    "one_plus_abs_x": (_d_one_plus_abs_x, {}),
    "scaling_h": (_d_scaling_h, {"hurst": 0.5}),
    "exp_t": (_d_exp_t, {"gamma": 1.0}),
}

_DEFAULTS: dict[str, dict[str, Any]] = {
    "wiener": {"sigma": 1.0},
    "fbm": {"sigma": 1.0},
    "ito": {"x0": 0.0},
    "ou": {"x0": 0.0, "stationary_start": False},
}


def _finite_positive(params, name, kind):
    v = params.get(name)
    if v is None:
        raise RejectedInputError(f"{kind} requires parameter {name!r}")
    v = float(v)
    if not math.isfinite(v) or v <= 0:
        raise RejectedInputError(f"{kind}: {name} must be finite and > 0, got {v}")
    return v


@dataclass(frozen=True)
class ProcessSpec:
    """Declarative description of a simulatable process.

    Use the classmethod constructors (:meth:`wiener`, :meth:`fbm`, :meth:`ito`,
    :meth:`ou`) or :meth:`from_dict` on the JSON form
    ``{"kind": "...", "params": {...}}``. Parameters are validated on
    construction.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise RejectedInputError(f"unknown process kind {self.kind!r}; expected one of {KINDS}")
        p = dict(_DEFAULTS[self.kind])
        p.update(self.params)
        kind = self.kind
        if kind in ("wiener", "fbm", "ou"):
            p["sigma"] = _finite_positive(p, "sigma", kind)
        if kind == "fbm":
            H = float(p.get("hurst", float("nan")))
            if not (0.0 < H < 1.0):
                raise RejectedInputError(f"fbm: hurst H must lie in the open interval (0, 1), got {H}")
            p["hurst"] = H
        elif kind == "ou":
            theta = float(p.get("theta", float("nan")))
            if not (math.isfinite(theta) and theta > 0):
                raise RejectedInputError(f"ou: theta must be > 0, got {theta}")
            p["theta"] = theta
            p["x0"] = float(p["x0"])
            p["stationary_start"] = bool(p["stationary_start"])
        elif kind == "ito":
            did = p.get("diffusion")
            if did not in DIFFUSIONS:
                raise RejectedInputError(
                    f"ito: unknown diffusion {did!r}; registered: {sorted(DIFFUSIONS)}"
                )
            merged = dict(DIFFUSIONS[did][1])
            merged.update(p)
            p = merged
            p["x0"] = float(p["x0"])
            if not math.isfinite(p["x0"]):
                raise RejectedInputError("ito: x0 must be finite")
            if did == "linear_x" and p["x0"] <= 0:
                raise RejectedInputError(f"ito linear_x: x0 must be > 0, got {p['x0']}")
            if did == "scaling_h":
                H = float(p["hurst"])
                if not (0.0 < H < 1.0):
                    raise RejectedInputError(f"ito scaling_h: hurst H must lie in (0, 1), got {H}")
                p["hurst"] = H
            if did == "exp_t":
                p["gamma"] = float(p["gamma"])
                if not math.isfinite(p["gamma"]):
                    raise RejectedInputError("ito exp_t: gamma must be finite")
        object.__setattr__(self, "params", p)

    @classmethod
    def wiener(cls, sigma: float = 1.0) -> "ProcessSpec":
        return cls("wiener", {"sigma": sigma})

    @classmethod
    def fbm(cls, hurst: float, sigma: float = 1.0) -> "ProcessSpec":
        return cls("fbm", {"hurst": hurst, "sigma": sigma})

    @classmethod
    def ito(cls, diffusion: str, x0: float = 0.0, **params: float) -> "ProcessSpec":
        return cls("ito", {"diffusion": diffusion, "x0": x0, **params})

    @classmethod
    def ou(cls, theta: float, sigma: float, x0: float = 0.0, stationary_start: bool = False) -> "ProcessSpec":
        return cls("ou", {"theta": theta, "sigma": sigma, "x0": x0, "stationary_start": stationary_start})

    @property
    def x0(self) -> float:
        """Deterministic starting level (``nan`` for a stationary OU start)."""
        if self.kind == "ou" and self.params["stationary_start"]:
            return float("nan")
        return float(self.params.get("x0", 0.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProcessSpec":
        if "kind" not in d:
            raise RejectedInputError("process spec is missing field 'kind'")
        params = d.get("params", {})
        if not isinstance(params, Mapping):
            raise RejectedInputError("process spec field 'params' must be an object")
        return cls(str(d["kind"]), dict(params))

    @classmethod
    def from_json(cls, text: str) -> "ProcessSpec":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Path:
    """One trajectory ``x(t_k)`` on ``grid``."""

    grid: TimeGrid
    values: np.ndarray
    seed_tag: str = ""

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.shape[0] != self.grid.n_points:
            raise RejectedInputError(
                f"path has {v.size} values, grid expects {self.grid.n_points}"
            )
        if not np.all(np.isfinite(v)):
            raise NumericalError("path contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Path):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``N`` trajectories strobed on one shared grid.

    ``values`` has shape ``(n_paths, grid.n_points)``; row ``k`` is run ``k``.
    ``meta`` carries provenance such as the segmentation used by
    :func:`ensemblab.ensemble_builder.segment_series`.
    """

    grid: TimeGrid
    values: np.ndarray
    seed_tag: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] != self.grid.n_points:
            raise RejectedInputError(
                f"ensemble values must have shape (N>=1, {self.grid.n_points}), got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise NumericalError("ensemble contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_paths(cls, paths: Sequence[Path]) -> "PathEnsemble":
        if not paths:
            raise RejectedInputError("an ensemble needs at least one path")
        grid = paths[0].grid
        if any(p.grid != grid for p in paths):
            raise RejectedInputError("all paths of an ensemble must share one grid")
        return cls(grid, np.stack([p.values for p in paths]), seed_tag=paths[0].seed_tag)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def __len__(self) -> int:
        return self.n_paths

    def __getitem__(self, k: int) -> Path:
        return Path(self.grid, self.values[k], seed_tag=f"{self.seed_tag}#{k}")

    def __iter__(self) -> Iterator[Path]:
        for k in range(self.n_paths):
            yield self[k]

    @property
    def paths(self) -> list[Path]:
        return list(self)

    def at(self, t: float) -> np.ndarray:
        """Cross-section ``x_k(t)`` over all runs."""
        return self.values[:, self.grid.index(t)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PathEnsemble):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def _seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        raise RejectedInputError(f"seed must be a non-negative integer or SeedSequence, got {seed!r}")
    if seed < 0:
        raise RejectedInputError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(int(seed))


def path_seed(master_seed, k: int) -> np.random.SeedSequence:
    """Stream for path ``k`` of the ensemble keyed by ``master_seed``."""
    ss = _seedseq(master_seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (int(k),))


def _seed_tag(ss: np.random.SeedSequence) -> str:
    return f"pcg64:entropy={ss.entropy}:spawn_key={tuple(ss.spawn_key)}"


def _normals(ss: np.random.SeedSequence, n: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(ss)).standard_normal(n)


# ---------------------------------------------------------------------------
# Analytic oracles
# ---------------------------------------------------------------------------


def fbm_covariance(s: float, t: float, H: float, sigma: float = 1.0) -> float:
    """Covariance of fractional Brownian motion, ``sigma^2/2 (s^2H + t^2H - |t-s|^2H)``."""
    if s < 0 or t < 0:
        raise RejectedInputError(f"fbm_covariance needs non-negative times, got s={s}, t={t}")
    if not (0.0 < H < 1.0):
        raise RejectedInputError(f"hurst H must lie in (0, 1), got {H}")
    h2 = 2.0 * H
    return 0.5 * sigma**2 * (s**h2 + t**h2 - abs(t - s) ** h2)


def _fgn_autocov(n: int, H: float) -> np.ndarray:
    """Autocovariance of unit-step, unit-variance fractional Gaussian noise at lags 0..n."""
    k = np.arange(n + 1, dtype=float)
    h2 = 2.0 * H
    return 0.5 * ((k + 1) ** h2 - 2 * k**h2 + np.abs(k - 1) ** h2)


@functools.lru_cache(maxsize=16)
def _fgn_cholesky(n: int, H: float) -> np.ndarray:
    cov = toeplitz(_fgn_autocov(n - 1, H))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eig_min = float(np.linalg.eigvalsh(cov).min())
        raise NumericalError(
            f"Cholesky factorization of the fGn covariance failed (n={n}, H={H}, min eigenvalue {eig_min:.3e})"
        ) from None
    L.setflags(write=False)
    return L


@functools.lru_cache(maxsize=16)
def _fgn_circulant_sqrt(n: int, H: float) -> np.ndarray:
    gamma = _fgn_autocov(n, H)
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-10 * lam.max():
        raise NumericalError(
            f"circulant embedding is not non-negative definite (n={n}, H={H}, min eigenvalue {lam.min():.3e})"
        )
    out = np.sqrt(np.clip(lam, 0.0, None) / row.size)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Kernels: noise matrix (m, n_draws) -> values (m, n_points)
# ---------------------------------------------------------------------------


def _n_draws(spec: ProcessSpec, grid: TimeGrid, substeps: int) -> int:
    n = grid.n_steps
    if spec.kind == "fbm" and n > CHOLESKY_MAX_STEPS:
        return 4 * n
    if spec.kind == "ito":
        return n * substeps
    if spec.kind == "ou" and spec.params["stationary_start"]:
        return n + 1
    return n


def _prepend_start(incr: np.ndarray, x0: float) -> np.ndarray:
    out = np.empty((incr.shape[0], incr.shape[1] + 1))
    out[:, 0] = x0
    np.cumsum(incr, axis=1, out=out[:, 1:])
    if x0 != 0.0:
        out[:, 1:] += x0
    return out


def _kernel_wiener(spec, grid, noise, substeps, offset):
    return _prepend_start(spec.params["sigma"] * math.sqrt(grid.dt) * noise, 0.0)


def _lower_tri_apply(noise: np.ndarray, L: np.ndarray) -> np.ndarray:
    """``noise @ L.T`` computed so that each row is independent of the batch.

    BLAS rounding depends on the matrix shape, which would make a path differ
    in the last bits depending on how many paths were simulated with it.
    """
    n = L.shape[0]
    if n <= _ELEMENTWISE_MAX:
        out = np.zeros((noise.shape[0], n))
        for j in range(n):
            out[:, j:] += noise[:, j : j + 1] * L[j:, j]
        return out
    return np.stack([L @ row for row in noise])


def _kernel_fbm(spec, grid, noise, substeps, offset):
    H, sigma, n = spec.params["hurst"], spec.params["sigma"], grid.n_steps
    scale = sigma * grid.dt**H
    if n <= CHOLESKY_MAX_STEPS:
        incr = _lower_tri_apply(noise, _fgn_cholesky(n, H))
    else:
        root = _fgn_circulant_sqrt(n, H)
        m = root.size
        z = noise[:, :m] + 1j * noise[:, m : 2 * m]
        incr = np.stack([np.fft.fft(root * row).real[:n] for row in z])
    return _prepend_start(scale * incr, 0.0)


def _kernel_ou(spec, grid, noise, substeps, offset):
    theta, sigma = spec.params["theta"], spec.params["sigma"]
    var_stat = sigma**2 / (2 * theta)
    a = math.exp(-theta * grid.dt)
    b = math.sqrt(var_stat * (1 - a * a))
    out = np.empty((noise.shape[0], grid.n_points))
    if spec.params["stationary_start"]:
        out[:, 0] = math.sqrt(var_stat) * noise[:, 0]
        noise = noise[:, 1:]
    else:
        out[:, 0] = spec.params["x0"]
    for k in range(grid.n_steps):
        out[:, k + 1] = a * out[:, k] + b * noise[:, k]
    return out


def _kernel_ito(spec, grid, noise, substeps, offset):
    p = spec.params
    D = DIFFUSIONS[p["diffusion"]][0]
    absorbing = p["diffusion"] == "linear_x"
    clamp_t = p["diffusion"] == "scaling_h"
    h = grid.dt / substeps
    sqrt_h = math.sqrt(h)
    m = noise.shape[0]
    out = np.empty((m, grid.n_points))
    x = np.full(m, p["x0"])
    out[:, 0] = x
    noise = noise.reshape(m, grid.n_steps, substeps)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_steps):
            for j in range(substeps):
                t = grid.t0 + k * grid.dt + j * h
                if clamp_t:
                    t = max(t, h)
                d = D(x, t, p)
                if np.any(d < 0):
                    bad = int(np.argmax(d < 0))
                    raise NumericalError(
                        f"path {offset + bad}: diffusion coefficient negative ({d[bad]:.3e}) at t={t}"
                    )
                x = x + np.sqrt(d) * sqrt_h * noise[:, k, j]
                if absorbing:
                    np.maximum(x, 0.0, out=x)
            if not np.all(np.isfinite(x)):
                bad = int(np.argmax(~np.isfinite(x)))
                raise NumericalError(
                    f"path {offset + bad}: overflow in Euler-Maruyama at t={grid.t0 + (k + 1) * grid.dt}"
                )
            out[:, k + 1] = x
    return out


_KERNELS = {"wiener": _kernel_wiener, "fbm": _kernel_fbm, "ou": _kernel_ou, "ito": _kernel_ito}


def _run_kernel(spec, grid, noise, substeps, offset):
    vals = _KERNELS[spec.kind](spec, grid, noise, substeps, offset)
    if not np.all(np.isfinite(vals)):
        bad = int(np.argmax(~np.all(np.isfinite(vals), axis=1)))
        raise NumericalError(f"path {offset + bad}: non-finite values produced by {spec.kind} generator")
    return vals


def _check_substeps(spec: ProcessSpec, substeps) -> int:
    if substeps is None:
        return DEFAULT_SUBSTEPS if spec.kind == "ito" else 1
    if int(substeps) != substeps or substeps < 1:
        raise RejectedInputError(f"substeps must be a positive integer, got {substeps}")
    return int(substeps)


def _simulate_one(spec: ProcessSpec, grid: TimeGrid, seed, substeps=None) -> Path:
    if not isinstance(grid, TimeGrid):
        raise RejectedInputError("grid must be a TimeGrid")
    substeps = _check_substeps(spec, substeps)
    ss = _seedseq(seed)
    noise = _normals(ss, _n_draws(spec, grid, substeps))[None, :]
    vals = _run_kernel(spec, grid, noise, substeps, 0)
    return Path(grid, vals[0], seed_tag=_seed_tag(ss))


def _expect(spec: ProcessSpec, kind: str) -> None:
    if not isinstance(spec, ProcessSpec) or spec.kind != kind:
        got = getattr(spec, "kind", type(spec).__name__)
        raise RejectedInputError(f"expected a {kind} ProcessSpec, got {got}")


def simulate_wiener(spec: ProcessSpec, grid: TimeGrid, seed) -> Path:
    """Brownian path with ``x(t0) = 0`` and independent ``N(0, sigma^2 dt)`` steps."""
    _expect(spec, "wiener")
    return _simulate_one(spec, grid, seed)


def simulate_fbm(spec: ProcessSpec, grid: TimeGrid, seed) -> Path:
    """Exact fractional Brownian motion draw with ``x(t0) = 0``.

    Increments are fractional Gaussian noise, sampled through a Cholesky
    factor of their Toeplitz covariance (or circulant embedding for long
    grids), then summed.
    """
    _expect(spec, "fbm")
    return _simulate_one(spec, grid, seed)


def simulate_ito(spec: ProcessSpec, grid: TimeGrid, seed, substeps: int = DEFAULT_SUBSTEPS) -> Path:
    """Euler-Maruyama path of ``dx = sqrt(D(x, t)) dW``.

    Each grid step is refined into ``substeps`` Euler steps; only grid
    values are reported. ``linear_x`` paths are absorbed at 0.
    """
    _expect(spec, "ito")
    return _simulate_one(spec, grid, seed, substeps)


def simulate_ou(spec: ProcessSpec, grid: TimeGrid, seed) -> Path:
    """Ornstein-Uhlenbeck path from the exact conditional-Gaussian transition."""
    _expect(spec, "ou")
    return _simulate_one(spec, grid, seed)


def simulate(spec: ProcessSpec, grid: TimeGrid, seed, substeps: int | None = None) -> Path:
    """Dispatch to the generator matching ``spec.kind``."""
    if not isinstance(spec, ProcessSpec):
        raise RejectedInputError("spec must be a ProcessSpec")
    return _simulate_one(spec, grid, seed, substeps)


def simulate_block(spec: ProcessSpec, grid: TimeGrid, master_seed, start: int, stop: int, substeps=None) -> np.ndarray:
    """Values of ensemble members ``start..stop-1`` as a ``(stop-start, n_points)`` array.

    Rows are identical to the corresponding rows of :func:`simulate_ensemble`
    with the same ``master_seed``.
    """
    substeps = _check_substeps(spec, substeps)
    root = _seedseq(master_seed)
    n_draws = _n_draws(spec, grid, substeps)
    noise = np.empty((stop - start, n_draws))
    for k in range(start, stop):
        noise[k - start] = _normals(path_seed(root, k), n_draws)
    return _run_kernel(spec, grid, noise, substeps, start)


def simulate_ensemble(
    spec: ProcessSpec,
    grid: TimeGrid,
    n_paths: int,
    master_seed,
    substeps: int | None = None,
    threads: int = 1,
) -> PathEnsemble:
    """Simulate ``n_paths`` independent runs strobed on ``grid``.

    Path ``k`` draws from ``path_seed(master_seed, k)``; the result does not
    depend on ``threads``.
    """
    if not isinstance(spec, ProcessSpec):
        raise RejectedInputError("spec must be a ProcessSpec")
    if int(n_paths) != n_paths or n_paths < 1:
        raise RejectedInputError(f"n_paths must be a positive integer, got {n_paths}")
    n_paths = int(n_paths)
    substeps = _check_substeps(spec, substeps)
    root = _seedseq(master_seed)
    out = np.empty((n_paths, grid.n_points))

    def work(start: int) -> None:
        stop = min(start + _CHUNK, n_paths)
        out[start:stop] = simulate_block(spec, grid, root, start, stop, substeps)

    starts = range(0, n_paths, _CHUNK)
    if threads and threads > 1 and n_paths > _CHUNK:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return PathEnsemble(grid, out, seed_tag=_seed_tag(root))
