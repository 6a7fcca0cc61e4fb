"""Exception hierarchy shared by the engine and the CLI.

The CLI maps these onto exit codes: ``DataError`` subclasses exit with 2,
``InvariantViolation`` with 3.
"""


class ShardStreamError(Exception):
    """Base class for all engine errors."""


class DataError(ShardStreamError):
    """Malformed input data or an unreadable/corrupt file."""


class FormatError(DataError):
    """A binary or text file does not match its declared layout."""


class DuplicateIdError(DataError):
    pass


class InvalidSpecError(DataError):
    pass


class ConfigError(DataError):
    """Invalid engine configuration or a dimension mismatch."""


class EmptyShardError(DataError):
    pass


class InvalidKError(DataError):
    pass


class QuantizationError(DataError):
    pass


class EncodeError(DataError):
    pass


class CorruptionError(DataError):
    """A stored code refers to something that cannot exist (e.g. centroid id >= K)."""


class IncompatibleEmbedderError(DataError):
    """Shards or models built with different embedders cannot be mixed."""


class OrderingError(DataError):
    """Documents were fed to the lifecycle out of stream order."""


class StateError(ShardStreamError):
    """An operation was attempted on an object in the wrong state."""


class InvariantViolation(ShardStreamError):
    """A structural invariant of the index was broken. Never swallowed."""
