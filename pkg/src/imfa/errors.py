"""Exception hierarchy shared by the whole package."""


class ImfaError(Exception):
    """Base class for all package errors."""


class DimensionError(ImfaError):
    """Shapes or extents violate an operation's contract."""


class NumericError(ImfaError):
    """Non-finite or otherwise invalid numeric input."""


class ContractError(ImfaError):
    """API misuse, e.g. backward on a non-scalar or a consumed tape."""


class ConfigError(ImfaError):
    """Invalid run configuration.  CLI exit code 2."""


class DataError(ImfaError):
    """Malformed dataset content.  CLI exit code 3."""


class DatasetIOError(DataError):
    """Missing or corrupt file on disk; message names the path."""
