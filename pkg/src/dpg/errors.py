"""Exception types raised by the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class FormatError(EngineError):
    """A binary file is malformed (bad magic, truncation, invalid field)."""


class VersionError(EngineError):
    """A file's schema version is not supported."""


class DataError(EngineError):
    """A dataset violates an invariant (zero-norm feature, duplicate id, ...)."""


class ConfigError(EngineError):
    """A configuration value is invalid or unknown."""


class MetricError(EngineError):
    """A metric cannot be computed from the given samples."""


class NumericError(EngineError):
    """A numeric operation failed (zero vector before normalization, ...)."""
