"""Exception hierarchy shared by every plate-lab module."""


class PlateLabError(Exception):
    """Base class for all errors raised by the laboratory."""


class GridMismatchError(PlateLabError, ValueError):
    """A field and a grid (or two fields) do not agree."""


class NonFiniteFieldError(PlateLabError, FloatingPointError):
    """A field picked up NaN or Inf values."""


class SolverError(PlateLabError, RuntimeError):
    """A linear or nonlinear solve did not reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class HistoryError(PlateLabError, ValueError):
    """The delay history does not cover the requested window or is malformed."""


class ManifestError(PlateLabError, ValueError):
    """An experiment manifest could not be parsed or validated."""


class VerificationError(PlateLabError, AssertionError):
    """An oracle check of the verification suite failed."""
