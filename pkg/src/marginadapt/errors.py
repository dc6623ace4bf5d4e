"""Exception types raised across the toolkit.

Everything derives from MarginAdaptError so callers (and the CLI) can catch
one base class and turn it into a nonzero exit.
"""


class MarginAdaptError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MarginAdaptError):
    """Array rank or shape does not match what an operation requires."""


class ConfigError(MarginAdaptError):
    """A configuration value is out of its documented range."""


class DataError(MarginAdaptError):
    """Dataset contents violate a contract (labels, sizes, domains)."""


class ParseError(DataError):
    """A file could not be parsed; message carries the offending line."""


class SchemaError(DataError):
    """A file parsed but its layout or version is not one we accept."""


class StateError(MarginAdaptError):
    """An operation ran before the state it depends on existed."""


class BatchTooSmallError(MarginAdaptError):
    """A batch statistic needs more rows than were provided."""


class InputError(MarginAdaptError):
    """A numeric input violates a precondition (e.g. rows not summing to 1)."""


class NumericalFailure(MarginAdaptError):
    """A computation produced NaN/Inf; fail loudly instead of propagating."""
