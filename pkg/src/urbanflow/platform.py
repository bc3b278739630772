"""Wiring of the full pipeline: topics, registry, jobs and read views.

The platform owns one bus and two jobs. Enrichment is a stateless stage from
``raw`` to ``enriched`` (dead letters split off), analytics is a two-stage
job that first re-keys ``enriched`` by cell and then runs the per-cell CEP
engine over single-owner partitions. Parameter updates flow through the
``parameters`` topic so the steering path and the data path share the same
ordering and durability story.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import os
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass, field

import yaml

from .cep import AnalyticsProcessor, CepConfig, RepartitionProcessor
from .enrichment import EnrichmentProcessor
from .geocell import CellId, GridConfig, cell_center_latlon
from .registry import (DeviceParams, DeviceRegistry, ParameterUpdate,
                       UpdateSubscriber)
from .runtime import JobConfig, JobHandle, StageSpec
from .streambus import DuplicateTopicError, StreamBus

log = logging.getLogger(__name__)

TOPIC_RAW = "raw"
TOPIC_ENRICHED = "enriched"
TOPIC_BY_CELL = "enriched_by_cell"
TOPIC_DEAD_LETTER = "dead_letter"
TOPIC_ALERTS = "alerts"
TOPIC_PARAMETERS = "parameters"


@dataclass
class PlatformConfig:
    data_dir: str | None = None  # None runs everything in memory
    fsync: str = "always"
    partitions: int = 8
    segment_bytes: int = 64 * 1024 * 1024
    checkpoint_dir: str | None = None
    checkpoint_interval_seconds: float = 10.0
    grid: GridConfig = field(default_factory=lambda: GridConfig(52.52, 13.405))
    cep: CepConfig = field(default_factory=lambda: CepConfig(band_delta=0.5))
    registry_snapshot: str | None = None
    enrichment_parallelism: int = 2
    repartition_parallelism: int = 1
    analytics_parallelism: int = 2

    @classmethod
    def from_yaml(cls, path: str) -> "PlatformConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p):
            if p is None:
                return None
            return p if os.path.isabs(p) else os.path.join(base, p)

        grid = raw.get("grid", {})
        cep = raw.get("cep", {})
        par = raw.get("parallelism", {})
        return cls(
            data_dir=resolve(raw.get("data_dir")),
            fsync=raw.get("fsync", "always"),
            partitions=int(raw.get("partitions", 8)),
            segment_bytes=int(raw.get("segment_bytes", 64 * 1024 * 1024)),
            checkpoint_dir=resolve(raw.get("checkpoint_dir")),
            checkpoint_interval_seconds=float(raw.get("checkpoint_interval_seconds", 10.0)),
            grid=GridConfig(
                origin_latitude=float(grid.get("origin_latitude", 52.52)),
                origin_longitude=float(grid.get("origin_longitude", 13.405)),
                hex_circumradius_m=float(grid.get("hex_circumradius_m", 500.0)),
            ),
            cep=CepConfig(
                band_delta=float(cep.get("band_delta", 0.5)),
                window_seconds=float(cep.get("window_seconds", 300.0)),
                pattern_window_seconds=float(cep.get("pattern_window_seconds", 60.0)),
                min_window_count=int(cep.get("min_window_count", 3)),
                allowed_lateness_seconds=float(cep.get("allowed_lateness_seconds", 10.0)),
            ),
            registry_snapshot=resolve(raw.get("registry_snapshot")),
            enrichment_parallelism=int(par.get("enrichment", 2)),
            repartition_parallelism=int(par.get("repartition", 1)),
            analytics_parallelism=int(par.get("analytics", 2)),
        )


class CellViewStore:
    """Latest per-cell CEP view, replaced whole so reads are torn-free."""

    def __init__(self):
        self._views: dict[str, dict] = {}
        self._lock = threading.Lock()

    def update(self, cell: str, view: dict):
        view = dict(view)
        view["updated_at"] = time.time()
        with self._lock:
            self._views[cell] = view

    def all(self) -> list[dict]:
        with self._lock:
            return list(self._views.values())


class AlertFeed:
    """Single consumer fanning the alerts topic out to stream subscribers.

    Keeps a bounded ring of recent alerts with monotonically increasing
    sequence numbers; subscribers block on a condition and pick up from the
    sequence they have already seen, so one slow client cannot stall others.
    """

    GROUP_ID = "gateway-alert-feed"

    def __init__(self, bus, topic: str = TOPIC_ALERTS, ring_size: int = 2048):
        self._consumer = bus.consumer(self.GROUP_ID, topic)
        self._ring: list[tuple[int, dict]] = []
        self._ring_size = ring_size
        self._seq = 0
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="alert-feed", daemon=True)

    def start(self) -> "AlertFeed":
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        self._thread.join(timeout=5)

    @property
    def latest_seq(self) -> int:
        return self._seq

    def _run(self):
        while not self._stop.is_set():
            records = self._consumer.poll(256)
            if not records:
                self._stop.wait(0.05)
                continue
            with self._cond:
                for rec in records:
                    try:
                        alert = json.loads(rec.payload)
                    except ValueError:
                        continue
                    self._seq += 1
                    self._ring.append((self._seq, alert))
                if len(self._ring) > self._ring_size:
                    del self._ring[:len(self._ring) - self._ring_size]
                self._cond.notify_all()
            self._consumer.commit()

    def wait_since(self, seq: int, timeout: float) -> list[tuple[int, dict]]:
        """Entries newer than seq, blocking up to timeout if there are none."""
        with self._cond:
            if self._seq <= seq:
                self._cond.wait(timeout)
            return [(s, a) for s, a in self._ring if s > seq]


class SteeringConflictError(Exception):
    def __init__(self, sensor_name: str, current_version: int):
        super().__init__(f"{sensor_name}: version conflict, current is {current_version}")
        self.sensor_name = sensor_name
        self.current_version = current_version


class UnknownSensorError(Exception):
    pass


class Platform:
    def __init__(self, config: PlatformConfig):
        self.config = config
        bus_dir = os.path.join(config.data_dir, "bus") if config.data_dir else None
        self.bus = StreamBus(data_dir=bus_dir, fsync=config.fsync,
                             segment_bytes=config.segment_bytes)
        self._ensure_topics()
        self.registry = DeviceRegistry()
        if config.registry_snapshot:
            self.registry.load_snapshot(config.registry_snapshot)
        self.updates = UpdateSubscriber(self.registry, self.bus, TOPIC_PARAMETERS)
        self.cell_views = CellViewStore()
        self.alert_feed = AlertFeed(self.bus)
        # without a data dir the platform is ephemeral, checkpoints included
        self._ephemeral_checkpoints = (config.checkpoint_dir is None
                                       and config.data_dir is None)
        checkpoint_dir = config.checkpoint_dir or (
            os.path.join(config.data_dir, "checkpoints") if config.data_dir
            else tempfile.mkdtemp(prefix="urbanflow-checkpoints-"))
        self._checkpoint_dir = checkpoint_dir
        self.enrichment_job = JobHandle(
            self.bus,
            JobConfig(job_id="enrichment", checkpoint_dir=checkpoint_dir,
                      checkpoint_interval_seconds=config.checkpoint_interval_seconds),
            [StageSpec("enrich", TOPIC_RAW,
                       lambda: EnrichmentProcessor(self.registry),
                       parallelism=config.enrichment_parallelism)],
        )
        self.analytics_job = JobHandle(
            self.bus,
            JobConfig(job_id="analytics", checkpoint_dir=checkpoint_dir,
                      checkpoint_interval_seconds=config.checkpoint_interval_seconds),
            [StageSpec("repartition", TOPIC_ENRICHED,
                       lambda: RepartitionProcessor(self.registry, config.grid),
                       parallelism=config.repartition_parallelism),
             StageSpec("cep", TOPIC_BY_CELL,
                       lambda: AnalyticsProcessor(config.cep,
                                                  publish_view=self.cell_views.update),
                       parallelism=config.analytics_parallelism)],
        )
        self._started = False
        self.started_at = time.time()

    def _ensure_topics(self):
        layout = [(TOPIC_RAW, self.config.partitions),
                  (TOPIC_ENRICHED, self.config.partitions),
                  (TOPIC_BY_CELL, self.config.partitions),
                  (TOPIC_DEAD_LETTER, 1),
                  (TOPIC_ALERTS, self.config.partitions),
                  (TOPIC_PARAMETERS, 1)]
        for topic, partitions in layout:
            try:
                self.bus.create_topic(topic, partitions)
            except DuplicateTopicError:
                pass

    # lifecycle

    def start(self) -> "Platform":
        if self._started:
            return self
        self._started = True
        self.updates.start()
        self.alert_feed.start()
        self.enrichment_job.start()
        self.analytics_job.start()
        return self

    def stop(self, checkpoint: bool = True):
        if not self._started:
            return
        self._started = False
        self.enrichment_job.stop(checkpoint=checkpoint)
        self.analytics_job.stop(checkpoint=checkpoint)
        self.alert_feed.stop()
        self.updates.stop()
        self.bus.close()
        if self._ephemeral_checkpoints:
            shutil.rmtree(self._checkpoint_dir, ignore_errors=True)

    def drain(self, timeout: float = 120.0) -> bool:
        """Settle the whole pipeline; input producers must have stopped."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            remaining = deadline - time.monotonic()
            if not self.enrichment_job.drain(timeout=min(remaining, 30.0)):
                continue
            if self.analytics_job.drain(timeout=min(remaining, 30.0)):
                if self.enrichment_job.position_lag() == 0:
                    return True
        return False

    # ingestion and steering

    def ingest(self, payloads: list[bytes]) -> int:
        """Raw readings in, keyed by sensor name when the payload offers one.

        Undecodable payloads are still published (with an empty key) so the
        enrichment stage can dead-letter them with the usual bookkeeping.
        """
        for payload in payloads:
            key = b""
            try:
                name = json.loads(payload).get("n")
                if isinstance(name, str):
                    key = name.encode()
            except (ValueError, AttributeError, UnicodeDecodeError):
                pass
            self.bus.publish(TOPIC_RAW, key, payload)
        return len(payloads)

    def apply_parameter_update(self, new_params: dict, expected_version: int | None = None,
                               create: bool = False,
                               wait_timeout: float = 10.0) -> dict:
        """Validate, publish to the parameters topic and wait for the commit.

        Returns {version, partition, offset, committed}. After committed is
        True, every later enrichment lookup sees the new parameters.
        """
        sensor_name = new_params.get("sensor_name", "")
        current = self.registry.lookup(sensor_name)
        if current is None and not create:
            raise UnknownSensorError(sensor_name)
        current_version = current.version if current is not None else 0
        if expected_version is not None and expected_version != current_version:
            raise SteeringConflictError(sensor_name, current_version)
        params = DeviceParams.from_dict({**new_params, "version": current_version + 1})
        update = ParameterUpdate(sensor_name=sensor_name, new_params=params,
                                 issued_at=int(time.time() * 1000))
        partition, offset = self.bus.publish(TOPIC_PARAMETERS, sensor_name.encode(),
                                             update.to_payload())
        committed = self.updates.wait_for_offset(partition, offset, timeout=wait_timeout)
        return {"version": params.version, "partition": partition,
                "offset": offset, "committed": committed}

    # read views

    def cells(self) -> list[dict]:
        views = self.cell_views.all()
        for view in views:
            cell = CellId.parse(view["cell"])
            lat, lon = cell_center_latlon(cell, self.config.grid)
            view["q"], view["r"] = cell.q, cell.r
            view["center_latitude"] = lat
            view["center_longitude"] = lon
            view["hex_circumradius_m"] = self.config.grid.hex_circumradius_m
        views.sort(key=lambda v: (v["q"], v["r"]))
        return views

    def alert_history(self, token: str | None, limit: int = 100) -> dict:
        """Oldest-first page over the alerts topic with an opaque token."""
        ends = self.bus.log_end_offsets(TOPIC_ALERTS)
        if token:
            try:
                cursors = {int(p): int(o) for p, o in
                           json.loads(base64.urlsafe_b64decode(token.encode())).items()}
            except (ValueError, KeyError):
                raise ValueError("bad pagination token")
        else:
            cursors = {p: 0 for p in ends}
        alerts: list[dict] = []
        exhausted = False
        while len(alerts) < limit and not exhausted:
            exhausted = True
            for partition in sorted(cursors):
                if cursors[partition] >= ends[partition]:
                    continue
                take = min(limit - len(alerts), 32)
                if take <= 0:
                    exhausted = False
                    break
                records = self.bus.read(TOPIC_ALERTS, partition, cursors[partition], take)
                for rec in records:
                    try:
                        alerts.append(json.loads(rec.payload))
                    except ValueError:
                        continue
                if records:
                    cursors[partition] = records[-1].offset + 1
                if cursors[partition] < ends[partition]:
                    exhausted = False
        done = all(cursors[p] >= ends[p] for p in cursors)
        next_token = None
        if not done:
            next_token = base64.urlsafe_b64encode(
                json.dumps({str(p): o for p, o in cursors.items()}).encode()).decode()
        return {"alerts": alerts, "next_token": next_token}

    def metrics(self) -> dict:
        enrichment = {"enriched": 0, "dead_lettered": 0}
        for worker in self.enrichment_job.workers:
            m = getattr(worker.processor, "metrics", None)
            if m is not None:
                enrichment["enriched"] += m.enriched
                enrichment["dead_lettered"] += m.dead_lettered
        cep = {"violations_total": 0, "alerts_total": 0, "late_dropped": 0,
               "dedup_dropped": 0}
        for view in self.cell_views.all():
            for key in cep:
                cep[key] += view.get(key, 0)
        reg = self.registry.metrics
        return {
            "uptime_seconds": time.time() - self.started_at,
            "cep_config": dataclasses.asdict(self.config.cep),
            "topics": {t: self.bus.log_end_offsets(t)
                       for t in (TOPIC_RAW, TOPIC_ENRICHED, TOPIC_BY_CELL,
                                 TOPIC_DEAD_LETTER, TOPIC_ALERTS, TOPIC_PARAMETERS)},
            "jobs": {"enrichment": self.enrichment_job.metrics(),
                     "analytics": self.analytics_job.metrics()},
            "enrichment": enrichment,
            "cep": cep,
            "registry": {"sensors": len(self.registry),
                         "applied": reg.applied, "stale_dropped": reg.stale_dropped,
                         "gap_dropped": reg.gap_dropped,
                         "malformed_dropped": reg.malformed_dropped},
        }
