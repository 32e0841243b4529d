"""Monte Carlo comparison of sliding-window time averages and ensemble averages."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    EnsemblabError,
    InsufficientDataError,
    IntegrityError,
    NormalizationError,
    NumericalError,
    RejectedInputError,
)
from .process_sim import Path, PathEnsemble, ProcessSpec, TimeGrid, simulate, simulate_ensemble  # noqa: E402

__all__ = [
    "EnsemblabError",
    "InsufficientDataError",
    "IntegrityError",
    "NormalizationError",
    "NumericalError",
    "Path",
    "PathEnsemble",
    "ProcessSpec",
    "RejectedInputError",
    "TimeGrid",
    "__version__",
    "simulate",
    "simulate_ensemble",
]
