"""Per-sensor enrichment parameter store.

The registry is an in-memory cache keyed by sensor name. It is seeded from a
JSON snapshot file at startup and then kept current by consuming the
``parameters`` topic in offset order. Updates carry a version that must be
exactly ``current + 1``; stale or gapped versions are dropped and counted,
matching at-least-once delivery from the bus.

Reads are wait-free: the whole map is swapped atomically on every applied
update, so a reader never observes a torn mix of old and new fields.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field

log = logging.getLogger(__name__)

KIND_ANALOG = "analog"
KIND_DIGITAL = "digital"

# "time", "latitude" etc. are fixed keys of the enriched wire format; a
# quantity with one of these names would collide with them.
RESERVED_QUANTITY_NAMES = {"latitude", "longitude", "time", "sensor_name", "source"}


class RegistryError(Exception):
    pass


class SnapshotError(RegistryError):
    pass


class DuplicateSensorError(RegistryError):
    pass


class StaleVersionError(RegistryError):
    """Update version <= current version: a lost or reordered update."""


class VersionGapError(RegistryError):
    """Update version > current + 1: an update went missing upstream."""


class ParamsInvalidError(RegistryError):
    def __init__(self, fld: str, reason: str):
        super().__init__(f"{fld}: {reason}")
        self.field = fld
        self.reason = reason


@dataclass(frozen=True)
class DeviceParams:
    sensor_name: str
    kind: str
    quantity: str
    unit: str
    calibration_slope: float
    calibration_offset: float
    latitude: float
    longitude: float
    version: int

    def validate(self):
        if not self.sensor_name:
            raise ParamsInvalidError("sensor_name", "must be non-empty")
        if self.kind not in (KIND_ANALOG, KIND_DIGITAL):
            raise ParamsInvalidError("kind", f"must be 'analog' or 'digital', got {self.kind!r}")
        if not self.quantity:
            raise ParamsInvalidError("quantity", "must be non-empty")
        if self.quantity in RESERVED_QUANTITY_NAMES:
            raise ParamsInvalidError("quantity", f"{self.quantity!r} is a reserved field name")
        if not (-90.0 <= self.latitude <= 90.0):
            raise ParamsInvalidError("latitude", f"{self.latitude} out of range [-90, 90]")
        if not (-180.0 <= self.longitude <= 180.0):
            raise ParamsInvalidError("longitude", f"{self.longitude} out of range [-180, 180]")
        if not (math.isfinite(self.calibration_slope) and math.isfinite(self.calibration_offset)):
            raise ParamsInvalidError("calibration_slope", "calibration must be finite")
        if self.kind == KIND_DIGITAL and (self.calibration_slope != 1.0
                                          or self.calibration_offset != 0.0):
            raise ParamsInvalidError(
                "calibration_slope", "digital sensors must have slope 1 and offset 0")
        if self.version < 0:
            raise ParamsInvalidError("version", "must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceParams":
        try:
            params = cls(
                sensor_name=d["sensor_name"],
                kind=d["kind"],
                quantity=d["quantity"],
                unit=d.get("unit", ""),
                calibration_slope=float(d["calibration_slope"]),
                calibration_offset=float(d["calibration_offset"]),
                latitude=float(d["latitude"]),
                longitude=float(d["longitude"]),
                version=int(d["version"]),
            )
        except KeyError as e:
            raise ParamsInvalidError(str(e.args[0]), "missing field") from None
        except (TypeError, ValueError) as e:
            raise ParamsInvalidError("params", f"bad field value: {e}") from None
        params.validate()
        return params


@dataclass
class ParameterUpdate:
    sensor_name: str
    new_params: DeviceParams
    issued_at: int  # unix ms

    def to_payload(self) -> bytes:
        return json.dumps({
            "sensor_name": self.sensor_name,
            "new_params": self.new_params.to_dict(),
            "issued_at": self.issued_at,
        }, separators=(",", ":")).encode()

    @classmethod
    def from_payload(cls, payload: bytes) -> "ParameterUpdate":
        d = json.loads(payload)
        return cls(sensor_name=d["sensor_name"],
                   new_params=DeviceParams.from_dict(d["new_params"]),
                   issued_at=int(d.get("issued_at", 0)))


@dataclass
class RegistryMetrics:
    applied: int = 0
    stale_dropped: int = 0
    gap_dropped: int = 0
    malformed_dropped: int = 0


class DeviceRegistry:
    """One writer (the update consumer), many wait-free readers."""

    def __init__(self):
        self._entries: dict[str, DeviceParams] = {}
        self._write_lock = threading.Lock()
        self.metrics = RegistryMetrics()

    def __len__(self):
        return len(self._entries)

    def load_snapshot(self, path: str) -> int:
        """Populate the cache from a JSON array of DeviceParams objects."""
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise SnapshotError(f"{path}: {e}") from e
        if not isinstance(raw, list):
            raise SnapshotError(f"{path}: expected a JSON array at top level")
        entries: dict[str, DeviceParams] = {}
        for i, item in enumerate(raw):
            try:
                params = DeviceParams.from_dict(item)
            except RegistryError as e:
                raise SnapshotError(f"{path}: record {i}: {e}") from e
            if params.sensor_name in entries:
                raise DuplicateSensorError(
                    f"{path}: record {i}: duplicate sensor {params.sensor_name!r}")
            entries[params.sensor_name] = params
        with self._write_lock:
            self._entries = entries
        log.info("registry loaded %d sensors from %s", len(entries), path)
        return len(entries)

    def load_entries(self, entries: list[DeviceParams]):
        """Seed directly from DeviceParams objects (simulated fleets)."""
        new: dict[str, DeviceParams] = {}
        for params in entries:
            params.validate()
            if params.sensor_name in new:
                raise DuplicateSensorError(f"duplicate sensor {params.sensor_name!r}")
            new[params.sensor_name] = params
        with self._write_lock:
            self._entries = new

    def lookup(self, sensor_name: str) -> DeviceParams | None:
        return self._entries.get(sensor_name)

    def current_version(self, sensor_name: str) -> int:
        params = self._entries.get(sensor_name)
        return params.version if params is not None else 0

    def sensors(self) -> list[DeviceParams]:
        return list(self._entries.values())

    def apply_update(self, update: ParameterUpdate) -> None:
        """Apply one versioned update atomically.

        Raises StaleVersionError / VersionGapError when the version is not
        exactly current + 1; the topic subscriber drops those and counts them.
        """
        params = update.new_params
        params.validate()
        if params.sensor_name != update.sensor_name:
            raise ParamsInvalidError("sensor_name", "update and params disagree")
        with self._write_lock:
            current = self.current_version(update.sensor_name)
            if params.version <= current:
                raise StaleVersionError(
                    f"{update.sensor_name}: version {params.version} <= current {current}")
            if params.version != current + 1:
                raise VersionGapError(
                    f"{update.sensor_name}: version {params.version}, expected {current + 1}")
            new_entries = dict(self._entries)
            new_entries[update.sensor_name] = params
            self._entries = new_entries
            self.metrics.applied += 1


class UpdateSubscriber:
    """Background consumer applying ``parameters`` records in offset order."""

    GROUP_ID = "registry-cache"

    def __init__(self, registry: DeviceRegistry, bus, topic: str = "parameters",
                 poll_interval: float = 0.05):
        self._registry = registry
        self._bus = bus
        self._topic = topic
        self._poll_interval = poll_interval
        self._consumer = bus.consumer(self.GROUP_ID, topic)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="registry-updates",
                                        daemon=True)

    def start(self) -> "UpdateSubscriber":
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=5)

    def committed(self) -> dict[int, int]:
        return self._consumer.committed()

    def wait_for_offset(self, partition: int, offset: int, timeout: float = 10.0) -> bool:
        """Block until the record at (partition, offset) has been applied and
        committed; afterwards every lookup sees the update."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self._consumer.committed().get(partition, 0) > offset:
                return True
            time.sleep(0.01)
        return False

    def _run(self):
        registry = self._registry
        while not self._stop.is_set():
            records = self._consumer.poll(256)
            if not records:
                self._stop.wait(self._poll_interval)
                continue
            for rec in records:
                try:
                    registry.apply_update(ParameterUpdate.from_payload(rec.payload))
                except StaleVersionError:
                    registry.metrics.stale_dropped += 1
                except VersionGapError as e:
                    registry.metrics.gap_dropped += 1
                    log.warning("parameter update gap: %s", e)
                except (RegistryError, ValueError, KeyError) as e:
                    registry.metrics.malformed_dropped += 1
                    log.warning("malformed parameter update at %s/%d/%d: %s",
                                rec.topic, rec.partition, rec.offset, e)
            self._consumer.commit()
