"""Exception types raised across the package."""


class FluForecastError(Exception):
    """Base class for all package errors."""


class CalendarError(FluForecastError, ValueError):
    """Invalid MMWR year/week combination."""


class ParseError(FluForecastError, ValueError):
    """Malformed input row or file."""


class IntegrityError(FluForecastError, ValueError):
    """Duplicate or conflicting records."""


class DomainError(FluForecastError, ValueError):
    """Numeric argument outside its admissible domain."""


class ConfigError(FluForecastError, ValueError):
    """Invalid or incomplete run configuration."""


class RegistryError(FluForecastError, KeyError):
    """Unknown location code or malformed location registry."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DegenerateScaleError(FluForecastError, ValueError):
    """A series has no spread to standardize against."""


class InsufficientDataError(FluForecastError, ValueError):
    """Not enough history or training seasons to fit a model."""


class ConvergenceError(FluForecastError, RuntimeError):
    """MCMC diagnostics failed; ``report`` holds the per-parameter table."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class AlignmentError(FluForecastError, ValueError):
    """Ensemble members do not describe the same task or level scheme."""


class UndefinedScoreError(FluForecastError, ValueError):
    """Aggregate score requested over an empty task set."""


class FormatError(FluForecastError, ValueError):
    """Forecast file does not follow the hub layout."""
