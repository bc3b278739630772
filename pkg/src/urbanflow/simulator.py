"""Deterministic sensor fleet simulation with ground-truth labels.

A fleet is generated from a seeded spec: sensors are scattered inside their
cell's hexagon and given per-sensor calibration, so the raw values on the
wire are pre-calibration and only become physical quantities after
enrichment. Calibration slopes are powers of two and offsets are dyadic
rationals, which makes the calibrate(inverse(x)) round trip bit-exact; with
zero noise an enriched value equals the configured base mean exactly.

Anomalies shift the physical value by a configured magnitude for a time
span. Every emitted reading is labelled normal or anomalous at emission
time, giving experiments an exact join key of (sensor_name, event_time).
"""

from __future__ import annotations

import json
import math
import time as _time
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Iterable

from .geocell import CellId, GridConfig, cell_center, unproject
from .registry import DeviceParams, KIND_ANALOG

DEFAULT_EPOCH = 1_700_000_000

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class CellSpec:
    center_latitude: float
    center_longitude: float
    sensor_count: int
    base_mean: float
    noise_sigma: float


@dataclass(frozen=True)
class FleetSpec:
    cells: tuple[CellSpec, ...]
    seed: int = 0
    quantity: str = "water_level"
    unit: str = "m"
    reporting_interval_seconds: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "FleetSpec":
        return cls(
            cells=tuple(CellSpec(**c) for c in d["cells"]),
            seed=int(d.get("seed", 0)),
            quantity=d.get("quantity", "water_level"),
            unit=d.get("unit", "m"),
            reporting_interval_seconds=int(d.get("reporting_interval_seconds", 5)),
        )

    @classmethod
    def from_json_file(cls, path: str) -> "FleetSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class AnomalySpec:
    cell_index: int
    affected_sensors: tuple[int, ...] | str  # indices within the cell, or "all"
    magnitude: float
    start_seconds: int
    duration_seconds: int

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalySpec":
        affected = d["affected_sensors"]
        if affected != "all":
            affected = tuple(int(i) for i in affected)
        return cls(cell_index=int(d["cell_index"]), affected_sensors=affected,
                   magnitude=float(d["magnitude"]),
                   start_seconds=int(d["start_seconds"]),
                   duration_seconds=int(d["duration_seconds"]))

    @classmethod
    def list_from_json_file(cls, path: str) -> list["AnomalySpec"]:
        with open(path) as fh:
            return [cls.from_dict(d) for d in json.load(fh)]


@dataclass(frozen=True)
class GroundTruthLabel:
    sensor_name: str
    event_time: int
    label: str

    def to_json_line(self) -> str:
        return json.dumps({"sensor_name": self.sensor_name,
                           "event_time": self.event_time,
                           "label": self.label}, separators=(",", ":"))


def load_labels(path: str) -> list[GroundTruthLabel]:
    labels = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            labels.append(GroundTruthLabel(d["sensor_name"], d["event_time"], d["label"]))
    return labels


@dataclass(frozen=True)
class SimSensor:
    name: str
    cell_index: int
    latitude: float
    longitude: float
    calibration_slope: float
    calibration_offset: float
    base_mean: float
    noise_sigma: float
    phase: int  # emission offset within the reporting interval


@dataclass
class Fleet:
    spec: FleetSpec
    sensors: list[SimSensor]

    def registry_entries(self) -> list[DeviceParams]:
        return [DeviceParams(
            sensor_name=s.name, kind=KIND_ANALOG, quantity=self.spec.quantity,
            unit=self.spec.unit, calibration_slope=s.calibration_slope,
            calibration_offset=s.calibration_offset, latitude=s.latitude,
            longitude=s.longitude, version=1,
        ) for s in self.sensors]

    def sensor_indices(self, cell_index: int) -> list[int]:
        return [i for i, s in enumerate(self.sensors) if s.cell_index == cell_index]


def generate_fleet(spec: FleetSpec, grid: GridConfig) -> Fleet:
    """Deterministic per seed: same spec, same fleet, same partitions."""
    rng = Random(spec.seed)
    interval = spec.reporting_interval_seconds
    # Stay inside the hexagon's inscribed circle so the placement jitter can
    # never spill a sensor into a neighbouring cell.
    max_offset = grid.hex_circumradius_m * math.sqrt(3) / 2.0 * 0.85
    sensors: list[SimSensor] = []
    for ci, cell_spec in enumerate(spec.cells):
        from .geocell import latlon_to_cell
        cell = latlon_to_cell(cell_spec.center_latitude, cell_spec.center_longitude, grid)
        cx, cy = cell_center(cell, grid)
        for j in range(cell_spec.sensor_count):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            dist = max_offset * math.sqrt(rng.random())
            lat, lon = unproject(cx + dist * math.cos(angle),
                                 cy + dist * math.sin(angle), grid)
            sensors.append(SimSensor(
                name=f"sim-{ci:02d}-{j:03d}",
                cell_index=ci,
                latitude=lat,
                longitude=lon,
                calibration_slope=2.0 ** rng.randint(-2, 2),
                calibration_offset=rng.randint(-20, 20) * 0.5,
                base_mean=cell_spec.base_mean,
                noise_sigma=cell_spec.noise_sigma,
                phase=rng.randrange(interval),
            ))
    return Fleet(spec=spec, sensors=sensors)


def raw_value_for(sensor: SimSensor, physical_value: float) -> float:
    """Inverse calibration so enrichment reproduces the physical value."""
    return (physical_value - sensor.calibration_offset) / sensor.calibration_slope


def encode_raw(sensor_name: str, event_time: int, raw_value: float) -> bytes:
    return json.dumps({"n": sensor_name, "t": event_time, "v": raw_value},
                      separators=(",", ":")).encode()


class _AnomalyTimeline:
    """Per-sensor list of (start, end, magnitude) spans, resolved once."""

    def __init__(self, fleet: Fleet, anomalies: Iterable[AnomalySpec]):
        self.spans: dict[int, list[tuple[int, int, float]]] = {}
        for spec in anomalies:
            indices = fleet.sensor_indices(spec.cell_index)
            if spec.affected_sensors != "all":
                indices = [indices[i] for i in spec.affected_sensors]
            span = (spec.start_seconds, spec.start_seconds + spec.duration_seconds,
                    spec.magnitude)
            for idx in indices:
                self.spans.setdefault(idx, []).append(span)

    def offset_at(self, sensor_index: int, t_rel: int) -> float:
        total = 0.0
        for start, end, magnitude in self.spans.get(sensor_index, ()):
            if start <= t_rel < end:
                total += magnitude
        return total


def run_simulation(fleet: Fleet, anomalies: Iterable[AnomalySpec],
                   duration_seconds: int, bus, topic: str = "raw", *,
                   seed: int | None = None, start_time: int = DEFAULT_EPOCH,
                   speedup: float | None = None,
                   labels_path: str | None = None) -> list[GroundTruthLabel]:
    """Emit the fleet's readings in event-time order and return labels.

    Sensors report every ``reporting_interval_seconds``, staggered by their
    phase. Event times are simulated epoch seconds; with ``speedup`` set,
    wall time is paced at that multiple of simulated time, otherwise the run
    is as fast as the bus accepts it.
    """
    rng = Random(fleet.spec.seed + 1 if seed is None else seed)
    interval = fleet.spec.reporting_interval_seconds
    timeline = _AnomalyTimeline(fleet, anomalies)
    by_phase: dict[int, list[int]] = {}
    for i, s in enumerate(fleet.sensors):
        by_phase.setdefault(s.phase, []).append(i)
    labels: list[GroundTruthLabel] = []
    out = open(labels_path, "w") if labels_path else None
    wall_start = _time.monotonic()
    try:
        for t_rel in range(duration_seconds):
            due = by_phase.get(t_rel % interval)
            if not due:
                continue
            if speedup is not None:
                target_wall = wall_start + t_rel / speedup
                delay = target_wall - _time.monotonic()
                if delay > 0:
                    _time.sleep(delay)
            event_time = start_time + t_rel
            for idx in due:
                sensor = fleet.sensors[idx]
                anomaly = timeline.offset_at(idx, t_rel)
                physical = sensor.base_mean + anomaly
                if sensor.noise_sigma > 0.0:
                    physical += rng.gauss(0.0, sensor.noise_sigma)
                bus.publish(topic, sensor.name.encode(),
                            encode_raw(sensor.name, event_time,
                                       raw_value_for(sensor, physical)))
                label = GroundTruthLabel(
                    sensor.name, event_time,
                    LABEL_ANOMALOUS if anomaly != 0.0 else LABEL_NORMAL)
                labels.append(label)
                if out is not None:
                    out.write(label.to_json_line() + "\n")
    finally:
        if out is not None:
            out.close()
    return labels


def generate_backlog(fleet: Fleet, message_count: int, bus, topic: str = "raw", *,
                     seed: int = 0, start_time: int = DEFAULT_EPOCH) -> int:
    """Publish a fixed-size backlog of valid readings as fast as possible.

    Sensors are swept round-robin; event time advances one reporting
    interval per sweep. Deterministic for a given fleet and seed.
    """
    rng = Random(seed)
    interval = fleet.spec.reporting_interval_seconds
    sensors = fleet.sensors
    published = 0
    event_time = start_time
    while published < message_count:
        for sensor in sensors:
            if published >= message_count:
                break
            physical = sensor.base_mean
            if sensor.noise_sigma > 0.0:
                physical += rng.gauss(0.0, sensor.noise_sigma)
            bus.publish(topic, sensor.name.encode(),
                        encode_raw(sensor.name, event_time,
                                   raw_value_for(sensor, physical)))
            published += 1
        event_time += interval
    return published


def generate_oscillating_load(fleet: Fleet, mean_rate: float, amplitude: float,
                              period_seconds: float, duration_seconds: float,
                              bus, topic: str = "raw", *, seed: int = 0,
                              start_time: int = DEFAULT_EPOCH,
                              stop: Callable[[], bool] | None = None,
                              chunk_limit: int = 2000) -> int:
    """Wall-clock paced sinusoidal load: rate(t) = mean + amp * sin(2*pi*t/T).

    Publishes round-robin over the fleet with event time following the wall
    clock, so downstream event-time windows see a live stream. Returns the
    number of readings published.
    """
    rng = Random(seed)
    sensors = fleet.sensors
    two_pi = 2.0 * math.pi
    published = 0
    cursor = 0
    wall_start = _time.monotonic()

    def target_count(elapsed: float) -> float:
        # integral of the rate curve from 0 to elapsed
        return (mean_rate * elapsed
                - amplitude * period_seconds / two_pi
                * (math.cos(two_pi * elapsed / period_seconds) - 1.0))

    while True:
        if stop is not None and stop():
            break
        elapsed = _time.monotonic() - wall_start
        if elapsed >= duration_seconds:
            break
        due = int(target_count(elapsed)) - published
        if due <= 0:
            _time.sleep(0.005)
            continue
        event_time = start_time + int(elapsed)
        for _ in range(min(due, chunk_limit)):
            sensor = sensors[cursor]
            cursor = (cursor + 1) % len(sensors)
            physical = sensor.base_mean
            if sensor.noise_sigma > 0.0:
                physical += rng.gauss(0.0, sensor.noise_sigma)
            bus.publish(topic, sensor.name.encode(),
                        encode_raw(sensor.name, event_time,
                                   raw_value_for(sensor, physical)))
            published += 1
    return published
