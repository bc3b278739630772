"""Failure injection under live load with an exactly-once audit.

The pipeline (enrichment, repartition, CEP) runs on a file-backed bus while
a sinusoidal load at half the measured maximum rate is published in wall
time. A killer takes out one randomly chosen worker at a fixed spacing; the
supervisor restores the whole affected job from its latest checkpoint each
time.

Two verifications close the loop after the run drains:

* A reference pipeline (fresh consumer groups and output topics, no kills)
  processes the identical raw log. The set of sources applied to CEP state
  must match the live run's set exactly: nothing lost across restarts.
* Per-sensor applied counters live inside the checkpointed state, so they
  rewind together with it. Equality with the reference counters means no
  reading was applied twice to surviving state either, despite replays.

Catch-up is judged against the pre-failure 95th percentile of total pipeline
lag: after every restart the lag must return below that baseline.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import threading
import time
from array import array
from dataclasses import dataclass

import numpy as np

from ..cep import AnalyticsProcessor, CepConfig, RepartitionProcessor
from ..enrichment import EnrichmentProcessor
from ..geocell import GridConfig
from ..registry import DeviceRegistry
from ..runtime import FailureInjector, JobConfig, JobHandle, StageSpec
from ..simulator import (CellSpec, FleetSpec, generate_backlog, generate_fleet,
                         generate_oscillating_load)
from ..streambus import StreamBus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReliabilityConfig:
    cells: int = 4
    sensors_per_cell: int = 16
    partitions: int = 8
    band_delta: float = 0.5
    # Window sized for checkpoint weight at full rate, not for detection;
    # detection quality has its own experiment.
    window_seconds: float = 30.0
    pattern_window_seconds: float = 60.0
    min_window_count: int = 3
    allowed_lateness_seconds: float = 10.0
    checkpoint_interval_seconds: float = 10.0
    detection_timeout_seconds: float = 5.0
    enrichment_parallelism: int = 2
    analytics_parallelism: int = 2
    max_measure_messages: int = 60_000
    load_fraction_of_max: float = 0.5
    amplitude_fraction_of_max: float = 0.2
    oscillation_period_seconds: float = 60.0
    load_duration_seconds: float = 520.0
    kill_count: int = 3
    kill_spacing_seconds: float = 180.0
    first_kill_seconds: float = 100.0
    baseline_skip_seconds: float = 30.0
    lag_sample_interval: float = 0.5
    # the reference rerun alone needs ~load_fraction * load_duration
    drain_timeout_seconds: float = 420.0
    restart_grace_seconds: float = 5.0
    seed: int = 7
    data_dir: str | None = None
    keep_data: bool = False
    origin_latitude: float = 52.52
    origin_longitude: float = 13.405


class _JobGroup:
    def __init__(self, jobs: list[JobHandle]):
        self.jobs = jobs

    @property
    def workers(self):
        return [w for job in self.jobs for w in job.workers]


def _build_fleet(cfg: ReliabilityConfig):
    cells = tuple(CellSpec(
        center_latitude=cfg.origin_latitude,
        center_longitude=cfg.origin_longitude + 0.02 * i,
        sensor_count=cfg.sensors_per_cell,
        base_mean=5.0,
        noise_sigma=0.0,  # constant values keep the audit order-independent
    ) for i in range(cfg.cells))
    return generate_fleet(FleetSpec(cells=cells, seed=cfg.seed),
                          GridConfig(cfg.origin_latitude, cfg.origin_longitude))


def _cep_config(cfg: ReliabilityConfig) -> CepConfig:
    return CepConfig(band_delta=cfg.band_delta,
                     window_seconds=cfg.window_seconds,
                     pattern_window_seconds=cfg.pattern_window_seconds,
                     min_window_count=cfg.min_window_count,
                     allowed_lateness_seconds=cfg.allowed_lateness_seconds)


def _build_jobs(bus, registry, cfg: ReliabilityConfig, checkpoint_dir: str,
                suffix: str, applied_log) -> tuple[JobHandle, JobHandle]:
    grid = GridConfig(cfg.origin_latitude, cfg.origin_longitude)
    enriched = f"enriched{suffix}"
    by_cell = f"enriched_by_cell{suffix}"
    alerts = f"alerts{suffix}"
    dead = f"dead_letter{suffix}"
    for topic, partitions in ((enriched, cfg.partitions), (by_cell, cfg.partitions),
                              (alerts, cfg.partitions), (dead, 1)):
        bus.create_topic(topic, partitions)
    common = dict(checkpoint_dir=checkpoint_dir,
                  checkpoint_interval_seconds=cfg.checkpoint_interval_seconds,
                  detection_timeout_seconds=cfg.detection_timeout_seconds)
    enrichment = JobHandle(
        bus, JobConfig(job_id=f"enrichment{suffix}", **common),
        [StageSpec("enrich", "raw",
                   lambda: EnrichmentProcessor(registry, output_topic=enriched,
                                               dead_letter_topic=dead),
                   parallelism=cfg.enrichment_parallelism)])
    analytics = JobHandle(
        bus, JobConfig(job_id=f"analytics{suffix}", **common),
        [StageSpec("repartition", enriched,
                   lambda: RepartitionProcessor(registry, grid, output_topic=by_cell)),
         StageSpec("cep", by_cell,
                   lambda: AnalyticsProcessor(_cep_config(cfg), alerts_topic=alerts,
                                              applied_log=applied_log),
                   parallelism=cfg.analytics_parallelism)])
    return enrichment, analytics


def _drain_all(jobs: list[JobHandle], timeout: float) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if all(job.drain(timeout=min(15.0, max(0.1, deadline - time.monotonic())))
               for job in jobs):
            if sum(job.position_lag() for job in jobs) == 0:
                return True
        time.sleep(0.2)
    return False


def _measure_max_rate(cfg: ReliabilityConfig, fleet, workdir: str) -> float:
    """End-to-end drain rate of the full pipeline over a fixed backlog."""
    data_dir = os.path.join(workdir, "max-measure")
    bus = StreamBus(os.path.join(data_dir, "bus"), fsync="never")
    bus.create_topic("raw", cfg.partitions)
    registry = DeviceRegistry()
    registry.load_entries(fleet.registry_entries())
    enrichment, analytics = _build_jobs(
        bus, registry, cfg, os.path.join(data_dir, "checkpoints"), "", None)
    enrichment.start()
    analytics.start()
    started = time.monotonic()
    generate_backlog(fleet, cfg.max_measure_messages, bus, seed=cfg.seed)
    if not _drain_all([enrichment, analytics], cfg.drain_timeout_seconds):
        raise RuntimeError("pipeline failed to drain while measuring max rate")
    wall = time.monotonic() - started
    enrichment.stop()
    analytics.stop()
    bus.close()
    shutil.rmtree(data_dir, ignore_errors=True)
    return cfg.max_measure_messages / wall


class _LagMonitor(threading.Thread):
    def __init__(self, jobs: list[JobHandle], interval: float):
        super().__init__(name="lag-monitor", daemon=True)
        self.jobs = jobs
        self.interval = interval
        self.samples: list[tuple[float, int]] = []
        # name avoids Thread's internal _stop attribute
        self._halt = threading.Event()

    def run(self):
        while not self._halt.wait(self.interval):
            try:
                lag = sum(job.position_lag() for job in self.jobs)
            except Exception:
                continue
            self.samples.append((time.monotonic(), lag))

    def stop(self):
        self._halt.set()
        self.join(timeout=5)


def _merge_applied_counts(checkpoint) -> dict[str, int]:
    """(cell|sensor) -> applied count, from a consistent CEP state snapshot."""
    merged: dict[str, int] = {}
    for snap in checkpoint.operator_state.get("cep", {}).values():
        for cell, state in snap["cells"].items():
            for sensor, count in state["applied_count"].items():
                merged[f"{cell}|{sensor}"] = count
    return merged


def _sum_counter(checkpoint, field: str) -> int:
    return sum(state[field]
               for snap in checkpoint.operator_state.get("cep", {}).values()
               for state in snap["cells"].values())


def run_reliability(cfg: ReliabilityConfig = ReliabilityConfig(),
                    out_dir: str | None = None) -> dict:
    started = time.monotonic()
    workdir = cfg.data_dir or tempfile.mkdtemp(prefix="urbanflow-reliability-")
    os.makedirs(workdir, exist_ok=True)
    fleet = _build_fleet(cfg)
    try:
        max_rate = _measure_max_rate(cfg, fleet, workdir)
        mean_rate = cfg.load_fraction_of_max * max_rate
        amplitude = cfg.amplitude_fraction_of_max * max_rate
        log.info("measured max %.0f rec/s, driving mean %.0f rec/s", max_rate, mean_rate)

        bus = StreamBus(os.path.join(workdir, "bus"), fsync="never")
        bus.create_topic("raw", cfg.partitions)
        registry = DeviceRegistry()
        registry.load_entries(fleet.registry_entries())
        checkpoint_dir = os.path.join(workdir, "checkpoints")
        applied_live: array = array("q")
        applied_ref: array = array("q")

        live_jobs = _build_jobs(bus, registry, cfg, checkpoint_dir, "_live",
                                applied_live)
        for job in live_jobs:
            job.start()
        monitor = _LagMonitor(list(live_jobs), cfg.lag_sample_interval)
        monitor.start()
        load_started = time.monotonic()
        injector = FailureInjector(_JobGroup(list(live_jobs)), cfg.kill_count,
                                   cfg.kill_spacing_seconds, seed=cfg.seed,
                                   first_delay_seconds=cfg.first_kill_seconds).start()
        published = generate_oscillating_load(
            fleet, mean_rate, amplitude, cfg.oscillation_period_seconds,
            cfg.load_duration_seconds, bus, seed=cfg.seed)
        injector.stop()
        drained_live = _drain_all(list(live_jobs), cfg.drain_timeout_seconds)
        monitor.stop()
        final_live = live_jobs[1].checkpoint_now()
        recoveries = [r for job in live_jobs for r in job.recovery_records]
        recoveries.sort(key=lambda r: r.failure_detected_at)
        for job in live_jobs:
            job.stop()

        ref_jobs = _build_jobs(bus, registry, cfg, checkpoint_dir, "_ref",
                               applied_ref)
        for job in ref_jobs:
            job.start()
        drained_ref = _drain_all(list(ref_jobs), cfg.drain_timeout_seconds)
        final_ref = ref_jobs[1].checkpoint_now()
        for job in ref_jobs:
            job.stop()
        bus.close()

        live_sources = np.unique(np.frombuffer(applied_live, dtype=np.int64)) \
            if len(applied_live) else np.empty(0, dtype=np.int64)
        ref_sources = np.unique(np.frombuffer(applied_ref, dtype=np.int64)) \
            if len(applied_ref) else np.empty(0, dtype=np.int64)
        sources_equal = bool(np.array_equal(live_sources, ref_sources))
        counts_live = _merge_applied_counts(final_live) if final_live else {}
        counts_ref = _merge_applied_counts(final_ref) if final_ref else {}
        counts_equal = counts_live == counts_ref and bool(counts_live)

        samples = monitor.samples
        baseline = [lag for t, lag in samples
                    if load_started + cfg.baseline_skip_seconds <= t
                    < load_started + cfg.first_kill_seconds]
        p95 = float(np.percentile(baseline, 95)) if baseline else 0.0
        kill_reports = []
        for i, kill in enumerate(injector.log):
            recovery = next((r for r in recoveries
                             if r.failure_detected_at >= kill["at"] - 0.001), None)
            report = {"kill_at_seconds": kill["at"] - load_started,
                      "worker": kill["worker"],
                      "detected": recovery is not None}
            if recovery is not None:
                restart = recovery.restart_complete_at - kill["at"]
                caught_up = next(
                    (t for t, lag in samples
                     if t >= recovery.restart_complete_at and lag <= p95), None)
                report.update({
                    "restart_seconds": restart,
                    "restart_within_bound": restart <= (cfg.detection_timeout_seconds
                                                        + cfg.restart_grace_seconds),
                    "checkpoint_id": recovery.checkpoint_id,
                    "caught_up_seconds": (caught_up - recovery.restart_complete_at
                                          if caught_up is not None else None),
                    "caught_up": caught_up is not None,
                })
            kill_reports.append(report)

        results = {
            "experiment": "reliability",
            "config": {
                "sensors": len(fleet.sensors),
                "partitions": cfg.partitions,
                "window_seconds": cfg.window_seconds,
                "checkpoint_interval_seconds": cfg.checkpoint_interval_seconds,
                "detection_timeout_seconds": cfg.detection_timeout_seconds,
                "load_duration_seconds": cfg.load_duration_seconds,
                "kill_count": cfg.kill_count,
                "kill_spacing_seconds": cfg.kill_spacing_seconds,
                "load_fraction_of_max": cfg.load_fraction_of_max,
            },
            "max_rate": max_rate,
            "mean_rate": mean_rate,
            "published": published,
            "drained_live": drained_live,
            "drained_ref": drained_ref,
            "kills": kill_reports,
            "recoveries": len(recoveries),
            "pre_failure_p95_lag": p95,
            "applied_live": len(applied_live),
            "applied_ref": len(applied_ref),
            "distinct_sources_live": int(live_sources.size),
            "distinct_sources_ref": int(ref_sources.size),
            "sources_equal": sources_equal,
            "applied_counts_equal": counts_equal,
            "late_dropped_live": _sum_counter(final_live, "late_dropped")
                                 if final_live else None,
            "late_dropped_ref": _sum_counter(final_ref, "late_dropped")
                                if final_ref else None,
            "dedup_dropped_live": _sum_counter(final_live, "dedup_dropped")
                                  if final_live else None,
            "wall_seconds": time.monotonic() - started,
        }
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "reliability.json"), "w") as fh:
                json.dump(results, fh, indent=2)
        return results
    finally:
        if not cfg.keep_data and cfg.data_dir is None:
            shutil.rmtree(workdir, ignore_errors=True)
