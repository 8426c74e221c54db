"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data problems (bad files, shape
mismatches, invalid configurations) exit with 3, numerical failures
during a fit exit with 4.
"""


class GfglError(Exception):
    """Base class for all package-specific errors."""


class DataError(GfglError):
    """Malformed input files, invalid datasets, or inconsistent shapes."""


class ConfigError(GfglError):
    """Invalid model / fit configuration."""


class NumericsError(GfglError):
    """Non-finite or otherwise unusable numerical state.

    Carries the name of the offending quantity when known.
    """

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


class TrainingDivergedError(NumericsError):
    """Optimization produced non-finite objectives too many times in a row."""


class OracleRegimeError(GfglError):
    """The exact censored-CDF lattice is too large; use the MC estimator."""
