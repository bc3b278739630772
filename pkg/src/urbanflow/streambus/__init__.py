from .bus import DEFAULT_SEGMENT_BYTES, Consumer, Record, StreamBus, TopicInfo
from .framing import decode_frame, encode_frame, frame_size
from .errors import (
    BusError,
    DuplicateTopicError,
    InvalidPartitionCountError,
    OffsetOutOfRangeError,
    OffsetRegressionError,
    StorageError,
    UnknownGroupError,
    UnknownTopicError,
)
from .hashing import partition_for, stable_hash

__all__ = [
    "BusError",
    "Consumer",
    "DEFAULT_SEGMENT_BYTES",
    "DuplicateTopicError",
    "InvalidPartitionCountError",
    "OffsetOutOfRangeError",
    "OffsetRegressionError",
    "Record",
    "StorageError",
    "StreamBus",
    "TopicInfo",
    "UnknownGroupError",
    "UnknownTopicError",
    "decode_frame",
    "encode_frame",
    "frame_size",
    "partition_for",
    "stable_hash",
]
