"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DacError(Exception):
    exit_code = 1


class ConfigError(DacError, ValueError):
    """Invalid configuration, manifest, or precondition violation."""

    exit_code = 2


class ShapeError(ConfigError):
    """Array dimensions do not agree."""


class DataError(DacError, ValueError):
    """Input data is malformed (non-finite entries, bad labels, ...)."""

    exit_code = 3


class FormatError(DataError):
    """Tensor file header is not a recognised DACT header."""


class TruncatedFileError(DataError, OSError):
    """Tensor file ended before the declared payload."""


class ConvergenceWarning(UserWarning):
    pass
