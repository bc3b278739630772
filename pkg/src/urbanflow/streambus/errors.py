"""Exceptions raised by the embedded message bus."""


class BusError(Exception):
    """Base class for all bus errors."""


class DuplicateTopicError(BusError):
    pass


class UnknownTopicError(BusError):
    pass


class UnknownGroupError(BusError):
    pass


class InvalidPartitionCountError(BusError):
    pass


class OffsetRegressionError(BusError):
    """Commit would move a committed offset backwards."""


class OffsetOutOfRangeError(BusError):
    """Offset outside [0, log end] for the partition."""


class StorageError(BusError):
    """Underlying segment file I/O failed."""
