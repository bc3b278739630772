"""Embedded partitioned message bus with consumer groups and durable offsets.

The bus is the single data plane of the platform: topics are partitioned,
append-only and never truncated, so the log doubles as the permanent
datastore. Records are routed to ``stable_hash(key) % partition_count``,
which keeps every key's records in publish order on one partition.

With ``data_dir=None`` everything lives in memory; with a directory the
partitions are segment files and group commits are persisted atomically
(write a temp file, then rename), so a crashed and reopened bus resumes with
the exact pre-crash log ends, payloads and committed offsets.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import namedtuple
from urllib.parse import quote

from .errors import (
    DuplicateTopicError,
    InvalidPartitionCountError,
    OffsetOutOfRangeError,
    OffsetRegressionError,
    StorageError,
    UnknownGroupError,
    UnknownTopicError,
)
from .hashing import partition_for
from .log import FSYNC_ALWAYS, FSYNC_NEVER, FilePartition, MemoryPartition

log = logging.getLogger(__name__)

DEFAULT_SEGMENT_BYTES = 64 << 20

Record = namedtuple("Record", "topic partition offset key payload append_time_ms")

TopicInfo = namedtuple("TopicInfo", "name partition_count")


class _Topic:
    def __init__(self, name: str, partitions: list):
        self.name = name
        self.partitions = partitions


class _GroupState:
    def __init__(self, group_id: str, topic: str, committed: dict[int, int]):
        self.group_id = group_id
        self.topic = topic
        self.committed = committed
        self.lock = threading.Lock()


class StreamBus:
    def __init__(self, data_dir: str | None = None, *,
                 fsync: str = FSYNC_ALWAYS,
                 segment_bytes: int = DEFAULT_SEGMENT_BYTES):
        if fsync not in (FSYNC_ALWAYS, FSYNC_NEVER):
            raise ValueError(f"fsync must be 'always' or 'never', got {fsync!r}")
        self._data_dir = data_dir
        self._fsync = fsync
        self._segment_bytes = segment_bytes
        self._topics: dict[str, _Topic] = {}
        self._groups: dict[tuple[str, str], _GroupState] = {}
        self._lock = threading.Lock()
        self._closed = False
        if data_dir is not None:
            os.makedirs(os.path.join(data_dir, "topics"), exist_ok=True)
            os.makedirs(os.path.join(data_dir, "groups"), exist_ok=True)
            self._reopen()

    @property
    def persistent(self) -> bool:
        return self._data_dir is not None

    # Topics ---------------------------------------------------------------

    def create_topic(self, name: str, partitions: int) -> TopicInfo:
        if partitions < 1:
            raise InvalidPartitionCountError(f"topic {name!r}: partitions must be >= 1")
        with self._lock:
            if name in self._topics:
                raise DuplicateTopicError(f"topic {name!r} already exists")
            self._topics[name] = _Topic(name, self._make_partitions(name, partitions))
            if self._data_dir is not None:
                meta = {"name": name, "partitions": partitions,
                        "created_ms": int(time.time() * 1000)}
                self._write_json(os.path.join(self._topic_dir(name), "meta.json"), meta)
        return TopicInfo(name, partitions)

    def topic_exists(self, name: str) -> bool:
        return name in self._topics

    def topics(self) -> list[TopicInfo]:
        return [TopicInfo(t.name, len(t.partitions)) for t in self._topics.values()]

    def partition_count(self, topic: str) -> int:
        return len(self._topic(topic).partitions)

    def _topic(self, name: str) -> _Topic:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopicError(f"unknown topic {name!r}") from None

    def _topic_dir(self, name: str) -> str:
        return os.path.join(self._data_dir, "topics", quote(name, safe=""))

    def _make_partitions(self, name: str, count: int) -> list:
        if self._data_dir is None:
            return [MemoryPartition(self._segment_bytes) for _ in range(count)]
        tdir = self._topic_dir(name)
        return [FilePartition(os.path.join(tdir, f"p{i:03d}"), self._segment_bytes,
                              self._fsync) for i in range(count)]

    def _reopen(self):
        tdir = os.path.join(self._data_dir, "topics")
        for entry in sorted(os.listdir(tdir)):
            meta_path = os.path.join(tdir, entry, "meta.json")
            if not os.path.isfile(meta_path):
                continue
            with open(meta_path) as fh:
                meta = json.load(fh)
            name = meta["name"]
            self._topics[name] = _Topic(name, self._make_partitions(name, meta["partitions"]))
        gdir = os.path.join(self._data_dir, "groups")
        for fname in os.listdir(gdir):
            if not fname.endswith(".json"):
                continue
            with open(os.path.join(gdir, fname)) as fh:
                state = json.load(fh)
            committed = {int(p): o for p, o in state["committed"].items()}
            key = (state["group_id"], state["topic"])
            self._groups[key] = _GroupState(state["group_id"], state["topic"], committed)
        if self._topics:
            log.info("reopened bus at %s: %d topics, %d groups",
                     self._data_dir, len(self._topics), len(self._groups))

    # Publishing -----------------------------------------------------------

    def publish(self, topic: str, key: bytes, payload: bytes,
                append_time_ms: int | None = None) -> tuple[int, int]:
        t = self._topic(topic)
        partition = partition_for(key, len(t.partitions))
        if append_time_ms is None:
            append_time_ms = int(time.time() * 1000)
        offset = t.partitions[partition].append(key, payload, append_time_ms)
        return partition, offset

    def log_end_offsets(self, topic: str) -> dict[int, int]:
        t = self._topic(topic)
        return {i: p.end_offset for i, p in enumerate(t.partitions)}

    # Random access (history queries, verification scans) -------------------

    def read(self, topic: str, partition: int, offset: int, max_records: int) -> list[Record]:
        t = self._topic(topic)
        if partition < 0 or partition >= len(t.partitions):
            raise OffsetOutOfRangeError(f"{topic!r} has no partition {partition}")
        part = t.partitions[partition]
        offset = min(offset, part.end_offset)
        cursor = part.cursor_for(offset)
        raw: list = []
        part.read_from(cursor, max_records, raw)
        return [Record(topic, partition, o, k, p, ms) for o, ms, k, p in raw]

    def find_offset_by_time(self, topic: str, partition: int, ts_ms: int) -> int:
        """First offset whose append time is >= ``ts_ms`` (or log end)."""
        part = self._topic(topic).partitions[partition]
        lo, hi = 0, part.end_offset
        while lo < hi:
            mid = (lo + hi) // 2
            rec = self.read(topic, partition, mid, 1)
            if rec and rec[0].append_time_ms < ts_ms:
                lo = mid + 1
            else:
                hi = mid
        return lo

    # Consumer groups --------------------------------------------------------

    def consumer(self, group_id: str, topic: str,
                 partitions: list[int] | None = None) -> "Consumer":
        t = self._topic(topic)
        if partitions is None:
            partitions = list(range(len(t.partitions)))
        group = self._group_state(group_id, topic)
        return Consumer(self, t, group, partitions)

    def _group_state(self, group_id: str, topic: str) -> _GroupState:
        key = (group_id, topic)
        with self._lock:
            group = self._groups.get(key)
            if group is None:
                count = len(self._topic(topic).partitions)
                group = _GroupState(group_id, topic, {i: 0 for i in range(count)})
                self._groups[key] = group
            elif len(group.committed) < len(self._topic(topic).partitions):
                for i in range(len(self._topic(topic).partitions)):
                    group.committed.setdefault(i, 0)
            return group

    def group_committed(self, group_id: str, topic: str) -> dict[int, int]:
        key = (group_id, topic)
        if key not in self._groups:
            raise UnknownGroupError(f"unknown group {group_id!r} on topic {topic!r}")
        return dict(self._groups[key].committed)

    def group_lag(self, group_id: str, topic: str) -> dict[int, int]:
        committed = self.group_committed(group_id, topic)
        ends = self.log_end_offsets(topic)
        return {p: ends[p] - committed.get(p, 0) for p in ends}

    def groups(self) -> list[tuple[str, str]]:
        return list(self._groups)

    def _persist_group(self, group: _GroupState):
        if self._data_dir is None:
            return
        fname = quote(group.group_id, safe="") + "__" + quote(group.topic, safe="") + ".json"
        path = os.path.join(self._data_dir, "groups", fname)
        self._write_json(path, {"group_id": group.group_id, "topic": group.topic,
                                "committed": group.committed})

    def _write_json(self, path: str, obj):
        tmp = path + ".tmp"
        try:
            with open(tmp, "w") as fh:
                json.dump(obj, fh)
                if self._fsync == FSYNC_ALWAYS:
                    fh.flush()
                    os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as e:
            raise StorageError(f"writing {path} failed: {e}") from e

    def close(self):
        with self._lock:
            if self._closed:
                return
            self._closed = True
            for t in self._topics.values():
                for p in t.partitions:
                    p.close()


class Consumer:
    """One group member owning a subset of a topic's partitions.

    Poll order is round-robin over the owned partitions, in ascending offset
    order within each. Polling advances only the in-memory read position;
    ``commit`` advances the group's durable offsets. A single Consumer must
    not be polled from two threads concurrently (callers own that exclusion).
    """

    def __init__(self, bus: StreamBus, topic: _Topic, group: _GroupState,
                 partitions: list[int]):
        self._bus = bus
        self._topic = topic
        self._group = group
        self._partitions = list(partitions)
        self._cursors = {
            p: topic.partitions[p].cursor_for(
                min(group.committed.get(p, 0), topic.partitions[p].end_offset))
            for p in self._partitions
        }
        self._rr = 0

    @property
    def group_id(self) -> str:
        return self._group.group_id

    @property
    def topic(self) -> str:
        return self._topic.name

    @property
    def partitions(self) -> list[int]:
        return list(self._partitions)

    def poll(self, max_records: int) -> list[Record]:
        records: list[Record] = []
        name = self._topic.name
        parts = self._partitions
        nparts = len(parts)
        raw: list = []
        for i in range(nparts):
            if len(records) >= max_records:
                break
            p = parts[(self._rr + i) % nparts]
            raw.clear()
            got = self._topic.partitions[p].read_from(
                self._cursors[p], max_records - len(records), raw)
            if got:
                records.extend(Record(name, p, o, k, pl, ms) for o, ms, k, pl in raw)
        self._rr = (self._rr + 1) % nparts
        return records

    def positions(self) -> dict[int, int]:
        return {p: c.next_offset for p, c in self._cursors.items()}

    def committed(self) -> dict[int, int]:
        return {p: self._group.committed.get(p, 0) for p in self._partitions}

    def commit(self, offsets: dict[int, int] | None = None) -> None:
        """Durably advance the group's committed offsets.

        With no argument, commits this consumer's current read positions.
        Offsets may not regress and may not exceed the log end.
        """
        if offsets is None:
            offsets = self.positions()
        with self._group.lock:
            for p, off in offsets.items():
                end = self._topic.partitions[p].end_offset
                current = self._group.committed.get(p, 0)
                if off > end:
                    raise OffsetOutOfRangeError(
                        f"commit {off} beyond log end {end} (partition {p})")
                if off < current:
                    raise OffsetRegressionError(
                        f"commit {off} below committed {current} (partition {p})")
            self._group.committed.update(offsets)
            self._bus._persist_group(self._group)

    def seek(self, offsets: dict[int, int]) -> None:
        """Reset read positions; the next poll starts from these offsets."""
        for p, off in offsets.items():
            if p not in self._cursors:
                raise OffsetOutOfRangeError(f"partition {p} not owned by this consumer")
            committed = self._group.committed.get(p, 0)
            if off < committed:
                raise OffsetRegressionError(
                    f"seek {off} below committed {committed} (partition {p}); "
                    "committed offsets never regress")
            self._cursors[p] = self._topic.partitions[p].cursor_for(off)

    def lag(self) -> dict[int, int]:
        return {p: self._topic.partitions[p].end_offset - self._group.committed.get(p, 0)
                for p in self._partitions}
