"""Partition logs: append-only record sequences with two storage backends.

``MemoryPartition`` keeps frames in RAM segment buffers; ``FilePartition``
appends the identical frames to segment files and can rebuild its state by
scanning them on reopen (a torn tail frame from a crash is truncated away,
which is correct because that publish never returned to its caller).

Both maintain a sparse offset index (every ``INDEX_INTERVAL`` records) for
seeks; sequential readers carry a byte cursor so polling is O(batch).
"""

from __future__ import annotations

import bisect
import logging
import os
import threading

from .errors import OffsetOutOfRangeError, StorageError
from .framing import HEADER, HEADER_SIZE, decode_frame, encode_frame, frame_size

log = logging.getLogger(__name__)

INDEX_INTERVAL = 1024
READ_CHUNK = 1 << 20

FSYNC_ALWAYS = "always"
FSYNC_NEVER = "never"


class Cursor:
    """Sequential read position inside one partition."""

    __slots__ = ("next_offset", "seg", "pos")

    def __init__(self, next_offset: int, seg: int, pos: int):
        self.next_offset = next_offset
        self.seg = seg
        self.pos = pos

    def __repr__(self):
        return f"Cursor(next_offset={self.next_offset}, seg={self.seg}, pos={self.pos})"


class _PartitionBase:
    def __init__(self, segment_bytes: int):
        self._segment_bytes = segment_bytes
        self._lock = threading.Lock()
        self._end_offset = 0
        self._last_append_ms = 0
        # Sparse index: record offset -> (segment, byte position), every
        # INDEX_INTERVAL records, seeded with the log start.
        self._index_offsets: list[int] = [0]
        self._index_pos: list[tuple[int, int]] = [(0, 0)]
        self._seg_lens: list[int] = [0]

    @property
    def end_offset(self) -> int:
        return self._end_offset

    def append(self, key: bytes, payload: bytes, append_time_ms: int) -> int:
        with self._lock:
            # Keep append times non-decreasing per partition so history
            # queries can binary-search by time.
            if append_time_ms < self._last_append_ms:
                append_time_ms = self._last_append_ms
            self._last_append_ms = append_time_ms
            offset = self._end_offset
            frame = encode_frame(offset, append_time_ms, key, payload)
            seg = len(self._seg_lens) - 1
            if self._seg_lens[seg] and self._seg_lens[seg] + len(frame) > self._segment_bytes:
                self._roll_segment()
                seg += 1
            self._write(seg, frame)
            self._seg_lens[seg] += len(frame)
            self._end_offset = offset + 1
            if self._end_offset % INDEX_INTERVAL == 0:
                self._index_offsets.append(self._end_offset)
                self._index_pos.append((seg, self._seg_lens[seg]))
            return offset

    def cursor_for(self, offset: int) -> Cursor:
        """Position a cursor at ``offset`` (which may equal the log end)."""
        end = self._end_offset
        if offset < 0 or offset > end:
            raise OffsetOutOfRangeError(f"offset {offset} outside [0, {end}]")
        i = bisect.bisect_right(self._index_offsets, offset) - 1
        cur = Cursor(self._index_offsets[i], *self._index_pos[i])
        if cur.next_offset < offset:
            self._skip_to(cur, offset)
        return cur

    def read_from(self, cursor: Cursor, max_records: int, out: list) -> int:
        """Append up to ``max_records`` ``(offset, append_ms, key, payload)``
        tuples to ``out``, advancing ``cursor``. Returns the count read."""
        end = self._end_offset
        n = 0
        while n < max_records and cursor.next_offset < end:
            got = self._read_some(cursor, max_records - n, end, out)
            if got == 0 and not self._advance_segment(cursor):
                break
            n += got
        return n

    def _advance_segment(self, cursor: Cursor) -> bool:
        if cursor.seg < len(self._seg_lens) - 1 and cursor.pos >= self._seg_lens[cursor.seg]:
            cursor.seg += 1
            cursor.pos = 0
            return True
        return False

    def _skip_to(self, cursor: Cursor, offset: int):
        sink: list = []
        while cursor.next_offset < offset:
            if self._read_some(cursor, min(offset - cursor.next_offset, 4096), offset, sink) == 0:
                if not self._advance_segment(cursor):
                    raise StorageError(
                        f"log scan stalled at offset {cursor.next_offset} seeking {offset}")
            sink.clear()

    # Backend hooks -------------------------------------------------------

    def _roll_segment(self):
        raise NotImplementedError

    def _write(self, seg: int, frame: bytes):
        raise NotImplementedError

    def _read_some(self, cursor: Cursor, max_records: int, end_offset: int, out: list) -> int:
        raise NotImplementedError

    def close(self):
        pass


class MemoryPartition(_PartitionBase):
    def __init__(self, segment_bytes: int):
        super().__init__(segment_bytes)
        self._segments: list[bytearray] = [bytearray()]

    def _roll_segment(self):
        self._segments.append(bytearray())
        self._seg_lens.append(0)

    def _write(self, seg: int, frame: bytes):
        self._segments[seg] += frame

    def _read_some(self, cursor: Cursor, max_records: int, end_offset: int, out: list) -> int:
        buf = self._segments[cursor.seg]
        limit = self._seg_lens[cursor.seg]
        n = 0
        pos = cursor.pos
        while n < max_records and cursor.next_offset < end_offset and pos < limit:
            decoded = decode_frame(buf, pos)
            if decoded is None:
                break
            offset, append_ms, key, payload, pos = decoded
            out.append((offset, append_ms, key, payload))
            cursor.next_offset = offset + 1
            n += 1
        cursor.pos = pos
        return n


class FilePartition(_PartitionBase):
    """One directory of segment files: ``seg-<base_offset>.log``."""

    def __init__(self, path: str, segment_bytes: int, fsync: str):
        super().__init__(segment_bytes)
        self._path = path
        self._fsync = fsync
        self._seg_bases: list[int] = [0]
        self._read_fds: dict[int, int] = {}
        os.makedirs(path, exist_ok=True)
        self._recover()
        self._append_fd = os.open(self._seg_path(len(self._seg_bases) - 1),
                                  os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def _seg_path(self, seg: int) -> str:
        return os.path.join(self._path, f"seg-{self._seg_bases[seg]:020d}.log")

    def _recover(self):
        names = sorted(f for f in os.listdir(self._path)
                       if f.startswith("seg-") and f.endswith(".log"))
        if not names:
            return
        self._seg_bases = [int(f[4:-4]) for f in names]
        self._seg_lens = []
        self._index_offsets = []
        self._index_pos = []
        next_offset = self._seg_bases[0]
        for seg, name in enumerate(names):
            full = os.path.join(self._path, name)
            with open(full, "rb") as fh:
                data = fh.read()
            pos = 0
            while True:
                if next_offset % INDEX_INTERVAL == 0:
                    self._index_offsets.append(next_offset)
                    self._index_pos.append((seg, pos))
                decoded = decode_frame(data, pos)
                if decoded is None:
                    break
                offset, append_ms, _, _, new_pos = decoded
                if offset != next_offset:
                    raise StorageError(
                        f"{full}: offset {offset} at byte {pos}, expected {next_offset}")
                self._last_append_ms = max(self._last_append_ms, append_ms)
                next_offset = offset + 1
                pos = new_pos
            if pos < len(data):
                log.warning("truncating torn tail of %s at byte %d (was %d)",
                            full, pos, len(data))
                with open(full, "r+b") as fh:
                    fh.truncate(pos)
            self._seg_lens.append(pos)
        self._end_offset = next_offset
        if not self._index_offsets:
            self._index_offsets = [self._seg_bases[0]]
            self._index_pos = [(0, 0)]

    def _roll_segment(self):
        os.close(self._append_fd)
        self._seg_bases.append(self._end_offset)
        self._seg_lens.append(0)
        self._append_fd = os.open(self._seg_path(len(self._seg_bases) - 1),
                                  os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def _write(self, seg: int, frame: bytes):
        try:
            os.write(self._append_fd, frame)
            if self._fsync == FSYNC_ALWAYS:
                os.fsync(self._append_fd)
        except OSError as e:
            raise StorageError(f"append to {self._seg_path(seg)} failed: {e}") from e

    def _read_fd(self, seg: int) -> int:
        fd = self._read_fds.get(seg)
        if fd is None:
            fd = os.open(self._seg_path(seg), os.O_RDONLY)
            self._read_fds[seg] = fd
        return fd

    def _read_some(self, cursor: Cursor, max_records: int, end_offset: int, out: list) -> int:
        limit = self._seg_lens[cursor.seg]
        if cursor.pos >= limit:
            return 0
        want = min(READ_CHUNK, limit - cursor.pos)
        data = os.pread(self._read_fd(cursor.seg), want, cursor.pos)
        n = 0
        pos = 0
        while n < max_records and cursor.next_offset < end_offset:
            decoded = decode_frame(data, pos)
            if decoded is None:
                if pos == 0 and len(data) >= HEADER_SIZE:
                    # Single frame larger than the chunk: read it exactly.
                    payload_len, key_len, _, _ = HEADER.unpack_from(data, 0)
                    need = HEADER_SIZE + key_len + payload_len
                    data = os.pread(self._read_fd(cursor.seg), need, cursor.pos)
                    decoded = decode_frame(data, 0)
                    if decoded is None:
                        break
                else:
                    break
            offset, append_ms, key, payload, new_pos = decoded
            out.append((offset, append_ms, key, payload))
            cursor.next_offset = offset + 1
            cursor.pos += new_pos - pos
            pos = new_pos
            n += 1
        return n

    def close(self):
        os.close(self._append_fd)
        for fd in self._read_fds.values():
            os.close(fd)
        self._read_fds.clear()
