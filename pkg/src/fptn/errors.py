"""Exception hierarchy shared across the package.

Grouping matters for the CLI: ``UserInputError`` subclasses map to exit
code 2 (bad inputs or configuration), everything else that signals a failed
check maps to exit code 1.
"""


class FptnError(Exception):
    """Base class for all errors raised by this package."""


class UserInputError(FptnError):
    """Bad file, config, or argument supplied by the caller."""


class DimensionError(UserInputError):
    """Tensor or array extents do not conform."""


class NumericError(FptnError):
    """An operation produced NaN or Inf."""


class StateError(FptnError):
    """An object was used before the state it needs exists."""


class TapeError(FptnError):
    """Differentiation contract violated (non-scalar loss, unrecorded loss)."""


class IngestionError(UserInputError):
    """Raw data file failed to parse or validate."""


class NormalizationError(FptnError):
    """Normalization statistics cannot be computed (e.g. zero variance)."""


class WindowingError(UserInputError):
    """Series too short for the requested window lengths."""


class ConfigurationError(UserInputError):
    """Invalid run configuration or split specification."""


class CompatibilityError(UserInputError):
    """Checkpoint and dataset disagree (e.g. sensor counts)."""
