"""Record frame codec shared by the in-memory and file-backed logs.

A partition log is a sequence of frames:

    [u32 payload_len][u32 key_len][u64 offset][u64 append_time_ms][key][payload]

little-endian, no padding. The same byte layout is used for segment files on
disk and for in-memory segment buffers, so replays are byte-identical across
backends and a persisted partition can be scanned back with this codec alone.
"""

from __future__ import annotations

import struct

HEADER = struct.Struct("<IIQQ")
HEADER_SIZE = HEADER.size  # 24 bytes


def encode_frame(offset: int, append_time_ms: int, key: bytes, payload: bytes) -> bytes:
    return HEADER.pack(len(payload), len(key), offset, append_time_ms) + key + payload


def decode_frame(buf, pos: int):
    """Decode one frame at ``pos``.

    Returns ``(offset, append_time_ms, key, payload, next_pos)`` or ``None``
    if the buffer ends before a complete frame (torn tail).
    """
    end = len(buf)
    if pos + HEADER_SIZE > end:
        return None
    payload_len, key_len, offset, append_ms = HEADER.unpack_from(buf, pos)
    body_end = pos + HEADER_SIZE + key_len + payload_len
    if body_end > end:
        return None
    key_start = pos + HEADER_SIZE
    key = bytes(buf[key_start:key_start + key_len])
    payload = bytes(buf[key_start + key_len:body_end])
    return offset, append_ms, key, payload, body_end


def frame_size(key: bytes, payload: bytes) -> int:
    return HEADER_SIZE + len(key) + len(payload)
