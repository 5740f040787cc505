"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class PitError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class DimensionError(PitError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""

    exit_code = 2


class ConfigError(PitError, ValueError):
    """An architecture or layer configuration is invalid."""

    exit_code = 2


class ContractError(PitError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class CheckpointError(PitError):
    """A checkpoint directory is missing or does not match its manifest."""

    exit_code = 3


class DataError(PitError):
    """A dataset could not be read or is malformed."""

    exit_code = 4


class FormatError(DataError):
    """A binary file does not follow its expected record layout."""
