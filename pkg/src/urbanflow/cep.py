"""Per-cell complex event processing with event-time semantics.

Each hex cell owns a rolling window over the enriched readings of every
sensor in the cell. A reading is checked against the window *before* being
inserted: if the window already holds at least ``min_window_count`` readings
and the value deviates from the rolling average by more than ``band_delta``,
the reading is a violation. Two or more violations by the same sensor whose
event times span at most ``pattern_window_seconds`` raise an alert.

State mutation is guarded for effectively-once processing: every reading
carries its source (raw partition, offset), sources per sensor arrive in
ascending order, and a reading at or below the last applied source is a
replay duplicate and is dropped before it can touch the window.

Lateness is judged per sensor, against that sensor's own newest applied
event time. Keyed partitioning preserves per-sensor order end to end, so
every apply-or-drop decision is a pure function of the sensor's stream and
never of how partitions happen to interleave at arrival; replaying the same
log always applies exactly the same reading set.
"""

from __future__ import annotations

import bisect
import hashlib
import heapq
import json
import logging
from dataclasses import dataclass, field
from operator import attrgetter
from typing import Callable, Iterable

from .enrichment import decode_enriched
from .geocell import GridConfig, latlon_to_cell
from .registry import DeviceRegistry

log = logging.getLogger(__name__)

# Exact rolling-sum recompute cadence, bounds float accumulation drift.
_RECOMPUTE_EVERY = 4096


@dataclass(frozen=True)
class CepConfig:
    band_delta: float
    window_seconds: float = 300.0
    pattern_window_seconds: float = 60.0
    min_window_count: int = 3
    allowed_lateness_seconds: float = 10.0

    def __post_init__(self):
        if self.band_delta <= 0:
            raise ValueError("band_delta must be positive")
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        if self.pattern_window_seconds <= 0:
            raise ValueError("pattern_window_seconds must be positive")
        if self.min_window_count < 1:
            raise ValueError("min_window_count must be >= 1")
        if self.allowed_lateness_seconds < 0:
            raise ValueError("allowed_lateness_seconds must be >= 0")


@dataclass(frozen=True)
class Violation:
    sensor_name: str
    event_time: int
    value: float
    rolling_average: float
    source: tuple[int, int]

    def to_wire(self) -> dict:
        return {"event_time": self.event_time, "value": self.value,
                "rolling_average": self.rolling_average}


@dataclass(frozen=True)
class Alert:
    alert_id: str
    cell: str
    sensor_name: str
    violations: tuple[Violation, ...]
    emitted_at: int  # event time of the newest violation, stable across replay

    def to_payload(self) -> bytes:
        return json.dumps({
            "alert_id": self.alert_id,
            "cell": self.cell,
            "sensor_name": self.sensor_name,
            "violations": [v.to_wire() for v in self.violations],
            "emitted_at": self.emitted_at,
        }, separators=(",", ":")).encode()


def alert_id_for(sensor_name: str, anchor_source: tuple[int, int]) -> str:
    """Deterministic id anchored at the earliest violation in the alert.

    A later alert extending the same burst keeps the id as long as its
    earliest violation is unchanged, so downstream consumers can collapse
    extensions and replay duplicates alike.
    """
    text = f"{sensor_name}|{anchor_source[0]}:{anchor_source[1]}"
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


class CellState:
    """All mutable CEP state for one cell; everything here is checkpointed."""

    __slots__ = ("cell", "buffer", "running_sum", "newest_event_time",
                 "violations", "last_source", "last_event_time",
                 "applied_count", "violations_total", "alerts_total",
                 "late_dropped", "dedup_dropped", "_mutations")

    def __init__(self, cell: str):
        self.cell = cell
        self.buffer: list[tuple[int, float]] = []  # heap ordered by event time
        self.running_sum = 0.0
        self.newest_event_time = 0
        self.violations: dict[str, list[Violation]] = {}
        self.last_source: dict[str, tuple[int, int]] = {}
        self.last_event_time: dict[str, int] = {}
        self.applied_count: dict[str, int] = {}
        self.violations_total = 0
        self.alerts_total = 0
        self.late_dropped = 0
        self.dedup_dropped = 0
        self._mutations = 0

    @property
    def count(self) -> int:
        return len(self.buffer)

    def rolling_average(self) -> float | None:
        if not self.buffer:
            return None
        return self.running_sum / len(self.buffer)

    def insert(self, event_time: int, value: float, window_seconds: float):
        heapq.heappush(self.buffer, (event_time, value))
        self.running_sum += value
        if event_time > self.newest_event_time:
            self.newest_event_time = event_time
        floor = self.newest_event_time - window_seconds
        while self.buffer and self.buffer[0][0] < floor:
            _, old = heapq.heappop(self.buffer)
            self.running_sum -= old
        self._mutations += 1
        if self._mutations % _RECOMPUTE_EVERY == 0:
            self.running_sum = sum(v for _, v in self.buffer)

    def is_duplicate(self, sensor_name: str, source: tuple[int, int]) -> bool:
        last = self.last_source.get(sensor_name)
        return last is not None and source[0] == last[0] and source[1] <= last[1]

    def snapshot(self) -> dict:
        return {
            "cell": self.cell,
            "buffer": [[et, v] for et, v in self.buffer],
            "running_sum": self.running_sum,
            "newest_event_time": self.newest_event_time,
            "violations": {
                name: [[v.event_time, v.value, v.rolling_average,
                        v.source[0], v.source[1]] for v in vs]
                for name, vs in self.violations.items() if vs
            },
            "last_source": {name: [p, o] for name, (p, o) in self.last_source.items()},
            "last_event_time": dict(self.last_event_time),
            "applied_count": dict(self.applied_count),
            "violations_total": self.violations_total,
            "alerts_total": self.alerts_total,
            "late_dropped": self.late_dropped,
            "dedup_dropped": self.dedup_dropped,
        }

    @classmethod
    def restore(cls, snap: dict) -> "CellState":
        state = cls(snap["cell"])
        state.buffer = [(et, v) for et, v in snap["buffer"]]
        heapq.heapify(state.buffer)
        state.running_sum = snap["running_sum"]
        state.newest_event_time = snap["newest_event_time"]
        state.violations = {
            name: [Violation(name, et, value, avg, (p, o))
                   for et, value, avg, p, o in vs]
            for name, vs in snap["violations"].items()
        }
        state.last_source = {name: (p, o) for name, (p, o) in snap["last_source"].items()}
        state.last_event_time = dict(snap["last_event_time"])
        state.applied_count = dict(snap["applied_count"])
        state.violations_total = snap["violations_total"]
        state.alerts_total = snap["alerts_total"]
        state.late_dropped = snap["late_dropped"]
        state.dedup_dropped = snap["dedup_dropped"]
        return state

    def view(self) -> dict:
        avg = self.rolling_average()
        return {
            "cell": self.cell,
            "sensors": len(self.applied_count),
            "window_count": len(self.buffer),
            "rolling_average": avg,
            "newest_event_time": self.newest_event_time,
            "violations_total": self.violations_total,
            "alerts_total": self.alerts_total,
            "late_dropped": self.late_dropped,
            "dedup_dropped": self.dedup_dropped,
        }


def check_then_update(state: CellState, sensor_name: str, event_time: int,
                      value: float, source: tuple[int, int],
                      cfg: CepConfig) -> Violation | None:
    """Check a reading against the window excluding itself, then insert it."""
    violation = None
    if len(state.buffer) >= cfg.min_window_count:
        average = state.running_sum / len(state.buffer)
        if abs(value - average) > cfg.band_delta:
            violation = Violation(sensor_name, event_time, value, average, source)
    state.insert(event_time, value, cfg.window_seconds)
    return violation


_BY_EVENT_TIME = attrgetter("event_time")


def match_pattern(state: CellState, violation: Violation,
                  cfg: CepConfig) -> Alert | None:
    """Fold a new violation into the sensor's history, alerting on repeats.

    The history keeps the violations inside the trailing
    ``pattern_window_seconds`` anchored at the newest violation seen. An
    alert fires whenever the new violation lands inside a window that then
    holds two or more, and it reports the whole window, so a long burst
    produces a chain of alerts sharing the id anchored at the burst's start
    until that start slides out of the window.
    """
    history = state.violations.setdefault(violation.sensor_name, [])
    bisect.insort(history, violation, key=_BY_EVENT_TIME)
    cutoff = history[-1].event_time - cfg.pattern_window_seconds
    while history and history[0].event_time < cutoff:
        history.pop(0)
    if violation.event_time < cutoff or len(history) < 2:
        return None
    return Alert(
        alert_id=alert_id_for(violation.sensor_name, history[0].source),
        cell=state.cell,
        sensor_name=violation.sensor_name,
        violations=tuple(history),
        emitted_at=history[-1].event_time,
    )


@dataclass
class AssociationCounts:
    anomalous_total: int = 0
    anomalous_with_alert: int = 0
    normal_total: int = 0
    normal_with_alert: int = 0

    @property
    def anomalous_without_alert(self) -> int:
        return self.anomalous_total - self.anomalous_with_alert

    @property
    def false_positive_rate(self) -> float:
        if self.normal_total == 0:
            return 0.0
        return self.normal_with_alert / self.normal_total


def alert_association(labels: Iterable, alerts: Iterable[dict]) -> AssociationCounts:
    """Join ground-truth labels with alert contents by (sensor, event time).

    A reading is alert-associated when any emitted alert lists a violation
    for that sensor at that event time. ``labels`` yields objects with
    sensor_name, event_time and label ("anomalous" or "normal") fields.
    """
    covered: set[tuple[str, int]] = set()
    for alert in alerts:
        sensor = alert["sensor_name"]
        for v in alert["violations"]:
            covered.add((sensor, v["event_time"]))
    counts = AssociationCounts()
    for lbl in labels:
        hit = (lbl.sensor_name, lbl.event_time) in covered
        if lbl.label == "anomalous":
            counts.anomalous_total += 1
            counts.anomalous_with_alert += hit
        else:
            counts.normal_total += 1
            counts.normal_with_alert += hit
    return counts


class CepEngine:
    """Cell-keyed state machine, one instance per analytics worker."""

    def __init__(self, cfg: CepConfig, applied_log=None):
        self.cfg = cfg
        self.states: dict[str, CellState] = {}
        # Optional audit sink of applied sources, packed partition<<56|offset.
        # Shared across worker generations so replays land in the same log.
        self.applied_log = applied_log

    def state_for(self, cell: str) -> CellState:
        state = self.states.get(cell)
        if state is None:
            state = CellState(cell)
            self.states[cell] = state
        return state

    def process_reading(self, cell: str, sensor_name: str, event_time: int,
                        value: float, source: tuple[int, int]) -> Alert | None:
        state = self.state_for(cell)
        if state.is_duplicate(sensor_name, source):
            state.dedup_dropped += 1
            return None
        state.last_source[sensor_name] = source
        # per sensor, not per cell: arrival interleaving across partitions
        # must not change which readings get applied
        newest_own = state.last_event_time.get(sensor_name)
        if (newest_own is not None
                and event_time < newest_own - self.cfg.allowed_lateness_seconds):
            state.late_dropped += 1
            return None
        if newest_own is None or event_time > newest_own:
            state.last_event_time[sensor_name] = event_time
        state.applied_count[sensor_name] = state.applied_count.get(sensor_name, 0) + 1
        if self.applied_log is not None:
            self.applied_log.append(source[0] << 56 | source[1])
        violation = check_then_update(state, sensor_name, event_time, value,
                                      source, self.cfg)
        if violation is None:
            return None
        state.violations_total += 1
        alert = match_pattern(state, violation, self.cfg)
        if alert is not None:
            state.alerts_total += 1
        return alert

    def snapshot(self) -> dict:
        return {"cells": {cell: st.snapshot() for cell, st in self.states.items()}}

    def restore(self, snap: dict):
        self.states = {cell: CellState.restore(s) for cell, s in snap["cells"].items()}


class RepartitionProcessor:
    """Stage 1 of analytics: re-key enriched readings by cell.

    The enriched topic is keyed by sensor name, so one cell's sensors are
    scattered across partitions. This stage routes each record to the cell
    topic keyed by the cell id string, giving the stateful stage single-owner
    partitions. The payload passes through untouched; the cell comes from the
    registry location, cached per sensor version.
    """

    def __init__(self, registry: DeviceRegistry, grid: GridConfig,
                 output_topic: str = "enriched_by_cell"):
        self._registry = registry
        self._grid = grid
        self._output_topic = output_topic
        self._cell_cache: dict[str, tuple[int, bytes]] = {}
        self.unroutable = 0

    def process(self, record) -> Iterable[tuple[str, bytes, bytes]]:
        sensor_name = record.key.decode()
        params = self._registry.lookup(sensor_name)
        if params is None:
            self.unroutable += 1
            return
        cached = self._cell_cache.get(sensor_name)
        if cached is not None and cached[0] == params.version:
            cell_key = cached[1]
        else:
            cell = latlon_to_cell(params.latitude, params.longitude, self._grid)
            cell_key = cell.key().encode()
            self._cell_cache[sensor_name] = (params.version, cell_key)
        yield (self._output_topic, cell_key, record.payload)

    def snapshot(self):
        return None

    def restore(self, state):
        pass


class AnalyticsProcessor:
    """Stage 2 of analytics: per-cell windowing, violations and alerts."""

    def __init__(self, cfg: CepConfig, alerts_topic: str = "alerts",
                 publish_view: Callable[[str, dict], None] | None = None,
                 applied_log=None):
        self.engine = CepEngine(cfg, applied_log=applied_log)
        self._alerts_topic = alerts_topic
        self._publish_view = publish_view
        self._dirty: set[str] = set()
        self._last_view_publish = 0.0

    def process(self, record) -> Iterable[tuple[str, bytes, bytes]]:
        cell = record.key.decode()
        reading = decode_enriched(record.payload)
        alert = self.engine.process_reading(cell, reading.sensor_name,
                                            reading.time, reading.value,
                                            reading.source)
        if self._publish_view is not None:
            self._dirty.add(cell)
        if alert is not None:
            yield (self._alerts_topic, record.key, alert.to_payload())

    def tick(self, now: float):
        if self._publish_view is None or not self._dirty:
            return
        if now - self._last_view_publish < 1.0:
            return
        self._last_view_publish = now
        for cell in self._dirty:
            self._publish_view(cell, self.engine.states[cell].view())
        self._dirty.clear()

    def snapshot(self) -> dict:
        return self.engine.snapshot()

    def restore(self, state: dict):
        self.engine.restore(state)
