"""Exception hierarchy shared across the package."""


class HyperlocalError(Exception):
    """Base class for all package errors."""


class ConfigError(HyperlocalError):
    """Invalid configuration or CLI arguments."""


class SchemaError(HyperlocalError):
    """Input table is missing required columns."""


class DataError(HyperlocalError):
    """Input data cannot support the requested computation."""


class DimensionError(DataError, ValueError):
    """Array shapes disagree."""


class SingularFitError(DataError):
    """Regression design is rank deficient."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class InputError(DataError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class NumericalError(HyperlocalError):
    """A factorization or normalization failed after stabilization."""

    def __init__(self, message, t=None, context=None):
        super().__init__(message)
        self.t = t
        self.context = context or {}


class OwnershipError(HyperlocalError):
    """A parallel worker touched a stream it does not own."""


class InvariantError(HyperlocalError):
    """Internal bookkeeping invariant was violated."""


class CheckpointError(ConfigError):
    """Checkpoint missing, corrupt or written under a different configuration."""
