"""Enrichment throughput scaling across process workers.

Thread workers share one interpreter, so adding them cannot add CPU; this
harness instead runs share-nothing worker processes, each owning a disjoint
partition subset of the same logical topic. Every process regenerates the
deterministic backlog for its own partitions (the key hash makes the split
reproducible), so no bytes cross process boundaries and the measured section
is pure pipeline work: poll, decode, look up, calibrate, encode, publish.

The sustained rate for a parallelism P is the total processed record count
divided by the wall time of the slowest worker, all workers released from a
shared barrier.
"""

from __future__ import annotations

import json
import math
import multiprocessing as mp
import os
import time
from dataclasses import dataclass

from ..enrichment import EnrichmentProcessor
from ..registry import DeviceRegistry
from ..simulator import CellSpec, FleetSpec, encode_raw, generate_fleet, raw_value_for
from ..geocell import GridConfig
from ..streambus import StreamBus, partition_for

_JOIN_GRACE_SECONDS = 240.0


@dataclass(frozen=True)
class ScalabilityConfig:
    parallelisms: tuple[int, ...] = (1, 2, 4)
    partitions: int = 8
    sensor_count: int = 512
    message_count: int = 1_000_000
    poll_batch: int = 1000
    origin_latitude: float = 52.52
    origin_longitude: float = 13.405


def _build_fleet(cfg: ScalabilityConfig):
    # one dense cell is enough; routing only looks at sensor names
    spec = FleetSpec(cells=(CellSpec(
        center_latitude=cfg.origin_latitude,
        center_longitude=cfg.origin_longitude,
        sensor_count=cfg.sensor_count,
        base_mean=5.0,
        noise_sigma=0.0,
    ),), seed=42)
    return generate_fleet(spec, GridConfig(cfg.origin_latitude, cfg.origin_longitude))


def _worker_main(index: int, parallelism: int, cfg_fields: dict, barrier,
                 results):
    cfg = ScalabilityConfig(**cfg_fields)
    fleet = _build_fleet(cfg)
    mine = set(range(cfg.partitions)[index::parallelism])
    own = [s for s in fleet.sensors
           if partition_for(s.name.encode(), cfg.partitions) in mine]

    bus = StreamBus()
    bus.create_topic("raw", cfg.partitions)
    bus.create_topic("enriched", cfg.partitions)
    bus.create_topic("dead_letter", 1)
    sweeps = math.ceil(cfg.message_count / len(fleet.sensors))
    event_time = 1_700_000_000
    for _ in range(sweeps):
        for sensor in own:
            bus.publish("raw", sensor.name.encode(),
                        encode_raw(sensor.name, event_time,
                                   raw_value_for(sensor, sensor.base_mean)))
        event_time += fleet.spec.reporting_interval_seconds

    registry = DeviceRegistry()
    registry.load_entries(fleet.registry_entries())
    processor = EnrichmentProcessor(registry)
    consumer = bus.consumer("bench", "raw", partitions=sorted(mine))

    barrier.wait()
    started = time.perf_counter()
    processed = 0
    while True:
        records = consumer.poll(cfg.poll_batch)
        if not records:
            break
        for record in records:
            for topic, key, payload in processor.process(record):
                bus.publish(topic, key, payload)
            processed += 1
    wall = time.perf_counter() - started
    results.put({"index": index, "processed": processed, "wall": wall,
                 "dead_lettered": processor.metrics.dead_lettered})


def _run_one(parallelism: int, cfg: ScalabilityConfig) -> dict:
    ctx = mp.get_context("spawn")
    barrier = ctx.Barrier(parallelism)
    results = ctx.Queue()
    cfg_fields = {
        "parallelisms": tuple(cfg.parallelisms),
        "partitions": cfg.partitions,
        "sensor_count": cfg.sensor_count,
        "message_count": cfg.message_count,
        "poll_batch": cfg.poll_batch,
        "origin_latitude": cfg.origin_latitude,
        "origin_longitude": cfg.origin_longitude,
    }
    procs = [ctx.Process(target=_worker_main,
                         args=(i, parallelism, cfg_fields, barrier, results),
                         daemon=True)
             for i in range(parallelism)]
    for p in procs:
        p.start()
    reports = []
    deadline = time.monotonic() + _JOIN_GRACE_SECONDS
    while len(reports) < parallelism and time.monotonic() < deadline:
        try:
            reports.append(results.get(timeout=1.0))
        except Exception:
            if any(p.exitcode not in (None, 0) for p in procs):
                break
    for p in procs:
        p.join(timeout=5)
        if p.is_alive():
            p.terminate()
    if len(reports) < parallelism:
        raise RuntimeError(
            f"scalability run with P={parallelism}: "
            f"only {len(reports)}/{parallelism} workers reported")
    total = sum(r["processed"] for r in reports)
    slowest = max(r["wall"] for r in reports)
    return {
        "parallelism": parallelism,
        "processed": total,
        "slowest_worker_wall": slowest,
        "records_per_second": total / slowest if slowest > 0 else 0.0,
        "dead_lettered": sum(r["dead_lettered"] for r in reports),
        "workers": sorted(reports, key=lambda r: r["index"]),
    }


def run_scalability(cfg: ScalabilityConfig = ScalabilityConfig(),
                    out_dir: str | None = None) -> dict:
    started = time.monotonic()
    runs = {}
    for parallelism in cfg.parallelisms:
        runs[parallelism] = _run_one(parallelism, cfg)
    rates = {p: r["records_per_second"] for p, r in runs.items()}
    speedup = None
    if 1 in rates and 4 in rates and rates[1] > 0:
        speedup = rates[4] / rates[1]
    results = {
        "experiment": "scalability",
        "cpu_count": os.cpu_count(),
        "config": {"partitions": cfg.partitions,
                   "sensor_count": cfg.sensor_count,
                   "message_count": cfg.message_count,
                   "parallelisms": list(cfg.parallelisms)},
        "runs": {str(p): r for p, r in runs.items()},
        "rates": {str(p): rate for p, rate in rates.items()},
        "speedup_4_over_1": speedup,
        "wall_seconds": time.monotonic() - started,
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "scalability.json"), "w") as fh:
            json.dump(results, fh, indent=2)
    return results
