"""Exception and warning classes raised by kestenlab."""

from __future__ import annotations

__all__ = [
    "KestenError",
    "ValidationError",
    "NotPositivelyRegular",
    "NotAllowable",
    "DegenerateQ",
    "NonContractive",
    "ArithmeticDetected",
    "EstimatorError",
    "NoConvergence",
    "NoRoot",
    "InterpolationOutOfRange",
    "TruncationDominates",
    "RegularityNotReached",
    "UnreachableSet",
    "InsufficientTailSamples",
    "RejectionTooCostly",
    "ConfigParse",
    "UnknownCommand",
]


class KestenError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(KestenError, ValueError):
    """A model or configuration violates a standing hypothesis."""


class NotPositivelyRegular(ValidationError):
    """No strictly positive product of atom matrices within the search depth."""


class NotAllowable(ValidationError):
    """An atom matrix has a zero row or a zero column."""


class DegenerateQ(ValidationError):
    """Every additive atom is the zero vector."""


class NonContractive(ValidationError):
    """The estimated top Lyapunov exponent is not negative."""


class ArithmeticDetected(UserWarning):
    """Log-norms of atom products look rationally dependent."""


class EstimatorError(KestenError, RuntimeError):
    """A numerical routine or Monte Carlo estimator could not deliver."""


class NoConvergence(EstimatorError):
    """Power iteration did not converge.

    Attributes
    ----------
    residual : float
        Last eigen residual seen before giving up.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class NoRoot(EstimatorError):
    """The bracket does not straddle lambda = 1."""


class InterpolationOutOfRange(EstimatorError):
    """A mapped direction fell outside the grid chart."""


class TruncationDominates(EstimatorError):
    """Too many paths hit the step cap before their stopping time."""


class RegularityNotReached(EstimatorError):
    """A backward direction was orthogonal to a forward direction."""


class UnreachableSet(EstimatorError):
    """The target set is missed persistently by the shifted walk."""


class InsufficientTailSamples(EstimatorError):
    """Too few exceedances at the largest level."""


class RejectionTooCostly(EstimatorError):
    """Acceptance rate of conditioned cycles is below the floor."""


class ConfigParse(ValidationError):
    """A model or run configuration file is malformed."""


class UnknownCommand(KestenError):
    """The command-line subcommand is not recognised."""
