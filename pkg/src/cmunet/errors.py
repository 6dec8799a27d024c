"""Error taxonomy shared across the package."""


class EngineError(Exception):
    """Base class for all cmunet errors."""


class DimensionError(EngineError):
    """Shapes or sizes violate an operation's contract."""


class ContractError(EngineError):
    """An API was called in a way its contract forbids."""


class DataError(EngineError):
    """Input data (labels, files, ranges) is invalid."""


class FormatError(EngineError):
    """An on-disk container is malformed."""


class ConfigError(EngineError):
    """A configuration document is invalid."""
