"""Exception hierarchy shared by every ensemblab module."""


class EnsemblabError(Exception):
    """Base class for errors raised by this package."""


class RejectedInputError(EnsemblabError, ValueError):
    """Inputs violate a documented precondition (bad parameter, off-grid time, ...)."""


class InsufficientDataError(EnsemblabError, ValueError):
    """Not enough windows, paths or segments to form the requested estimate."""


class NumericalError(EnsemblabError, ArithmeticError):
    """A computation failed numerically (factorization, overflow, degenerate fit)."""


class IntegrityError(EnsemblabError):
    """A persisted artifact is corrupted or inconsistent with its manifest."""


class NormalizationError(EnsemblabError, ValueError):
    """A histogram lost too much mass to its overflow counters."""
