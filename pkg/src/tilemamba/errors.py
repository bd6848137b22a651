"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: contract/config errors exit 1,
I/O and format errors exit 2.
"""


class TileMambaError(Exception):
    """Base class for all package errors."""


class DimensionError(TileMambaError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(TileMambaError):
    """A configuration value is invalid or inconsistent."""


class ContractError(TileMambaError):
    """An operation was invoked outside its stated preconditions."""


class FormatError(TileMambaError):
    """A serialized file is malformed (bad magic, version, or payload)."""
