"""Exception hierarchy shared by all gyromoe modules."""


class GyroMoeError(Exception):
    """Base class for every error raised by this package."""


class ContractError(GyroMoeError):
    """A documented precondition or invariant was violated."""


class DimensionError(ContractError):
    """Array shapes are incompatible for the requested operation."""


class MaskError(ContractError):
    """A patch mask leaves the operation without usable tokens."""


class ConfigError(GyroMoeError):
    """A configuration value is missing, malformed, or inconsistent."""


class CsvParseError(GyroMoeError):
    """A CSV row could not be parsed; the message carries the line number."""


class CsvFormatError(GyroMoeError):
    """The CSV file structure (header, time base) is invalid."""


class CheckpointError(GyroMoeError):
    """A checkpoint file is missing, truncated, or from an unknown format."""
