"""Exception types shared across the package."""


class AvasrError(Exception):
    """Base class for all errors raised by this package."""


class DataError(AvasrError):
    """Invalid input data: manifests, audio, feature files, model files."""


class FormatError(DataError):
    """A binary or text artifact violates its declared on-disk format."""


class ConfigError(DataError):
    """A configuration value is missing or out of range.

    The message names the offending field, e.g. ``training.learning_rate``.
    """


class NumericError(AvasrError):
    """A numeric computation produced non-finite or unusable results."""
