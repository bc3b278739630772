"""Thread-based stream job execution with checkpoint/restore recovery.

A job is a list of stages; each stage consumes one topic with a fixed
parallelism, every worker owning a disjoint partition subset (round-robin by
worker index, so the assignment is reproducible across restarts). Workers
publish downstream synchronously while polling batches.

Consistency comes from a stop-the-world barrier: all workers pause between
batches, the supervisor snapshots consumer positions plus operator state,
persists the checkpoint, commits the offsets, then resumes everyone. A batch
is either fully processed and inside the snapshot or not started, never
half-applied.

Failure model: a killed or crashed worker stops heartbeating (or its thread
dies) and the supervisor restores the whole job from the newest complete
checkpoint. Replayed input may duplicate records already published
downstream; stateful consumers drop those by source, so state is applied
effectively once even though delivery is at least once.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Iterable, Protocol

from .checkpoint import Checkpoint, CheckpointStore

log = logging.getLogger(__name__)

RUNNING = "running"
PAUSED = "paused"
STOPPED = "stopped"
DEAD = "dead"

_IDLE_SLEEP_MIN = 0.001
_IDLE_SLEEP_MAX = 0.016
_BARRIER_ACK_TIMEOUT = 10.0
_SAVE_RETRIES = 3


class Processor(Protocol):
    def process(self, record) -> Iterable[tuple[str, bytes, bytes]]: ...

    def snapshot(self) -> object: ...

    def restore(self, state) -> None: ...


@dataclass(frozen=True)
class StageSpec:
    name: str
    input_topic: str
    processor_factory: Callable[[], Processor]
    parallelism: int = 1


@dataclass(frozen=True)
class JobConfig:
    job_id: str
    checkpoint_dir: str
    checkpoint_interval_seconds: float = 10.0
    heartbeat_interval_seconds: float = 1.0
    detection_timeout_seconds: float = 5.0
    poll_batch: int = 500


@dataclass
class RecoveryRecord:
    failed_workers: list[str]
    failure_detected_at: float  # monotonic seconds
    restart_complete_at: float
    checkpoint_id: int | None


class _Worker(threading.Thread):
    def __init__(self, job: "JobHandle", stage: StageSpec, index: int,
                 partitions: list[int]):
        super().__init__(name=f"{job.config.job_id}.{stage.name}.{index}", daemon=True)
        self.job = job
        self.stage = stage
        self.index = index
        self.partitions = partitions
        self.worker_id = f"{stage.name}/{index}"
        self.processor = stage.processor_factory()
        self.consumer = job.bus.consumer(job.group_id(stage), stage.input_topic,
                                         partitions=partitions)
        self.kill_flag = threading.Event()
        self.stop_flag = threading.Event()
        self.pause_request = threading.Event()
        self.pause_ack = threading.Event()
        self.resume_event = threading.Event()
        self.heartbeat_ts = time.monotonic()
        self.processed = 0
        self.state = RUNNING

    def kill(self):
        """Abrupt: the worker exits at the next record boundary, committing
        nothing and flushing nothing."""
        self.kill_flag.set()

    def run(self):
        bus = self.job.bus
        consumer = self.consumer
        processor = self.processor
        tick = getattr(processor, "tick", None)
        batch = self.job.config.poll_batch
        idle = _IDLE_SLEEP_MIN
        try:
            while True:
                if self.kill_flag.is_set():
                    self.state = DEAD
                    return
                if self.stop_flag.is_set():
                    self.state = STOPPED
                    return
                if self.pause_request.is_set():
                    self._barrier_wait()
                    continue
                records = consumer.poll(batch)
                now = time.monotonic()
                self.heartbeat_ts = now
                if tick is not None:
                    tick(now)
                if not records:
                    time.sleep(idle)
                    idle = min(idle * 2, _IDLE_SLEEP_MAX)
                    continue
                idle = _IDLE_SLEEP_MIN
                for record in records:
                    if self.kill_flag.is_set():
                        self.state = DEAD
                        return
                    for topic, key, payload in processor.process(record):
                        bus.publish(topic, key, payload)
                    self.processed += 1
                self.heartbeat_ts = time.monotonic()
        except Exception:
            log.exception("worker %s crashed", self.worker_id)
            self.state = DEAD

    def _barrier_wait(self):
        self.state = PAUSED
        self.pause_ack.set()
        while not self.resume_event.wait(0.02):
            self.heartbeat_ts = time.monotonic()
            if self.kill_flag.is_set() or self.stop_flag.is_set():
                self.state = DEAD if self.kill_flag.is_set() else STOPPED
                return
        self.pause_ack.clear()
        self.state = RUNNING
        self.heartbeat_ts = time.monotonic()


class JobHandle:
    """Owns the workers and the supervisor thread for one job."""

    def __init__(self, bus, config: JobConfig, stages: list[StageSpec]):
        if not stages:
            raise ValueError("job needs at least one stage")
        names = [s.name for s in stages]
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")
        self.bus = bus
        self.config = config
        self.stages = stages
        self.store = CheckpointStore(config.checkpoint_dir, config.job_id)
        self.workers: list[_Worker] = []
        self.recovery_records: list[RecoveryRecord] = []
        self.checkpoint_failures = 0
        self.storage_alarm = False
        self._barrier_lock = threading.RLock()
        self._stopping = threading.Event()
        self._monitor: threading.Thread | None = None
        self._last_checkpoint: Checkpoint | None = None
        self._last_checkpoint_at = 0.0
        self._next_checkpoint_id = 1
        self._throughput_samples: deque[tuple[float, int]] = deque(maxlen=240)
        self._started = False

    def group_id(self, stage: StageSpec) -> str:
        return f"{self.config.job_id}.{stage.name}"

    def _assignment(self, stage: StageSpec, index: int) -> list[int]:
        partitions = sorted(self.bus.log_end_offsets(stage.input_topic))
        return partitions[index::stage.parallelism]

    # lifecycle

    def start(self, from_checkpoint: bool = True) -> "JobHandle":
        if self._started:
            raise RuntimeError("job already started")
        self._started = True
        checkpoint = self.store.load_latest() if from_checkpoint else None
        self._spawn_workers(checkpoint)
        self._last_checkpoint_at = time.monotonic()
        self._monitor = threading.Thread(target=self._monitor_loop,
                                         name=f"{self.config.job_id}.supervisor",
                                         daemon=True)
        self._monitor.start()
        return self

    def stop(self, checkpoint: bool = False):
        if checkpoint:
            self.checkpoint_now()
        self._stopping.set()
        if self._monitor is not None:
            self._monitor.join(timeout=10)
        for worker in self.workers:
            worker.stop_flag.set()
            worker.resume_event.set()
        for worker in self.workers:
            worker.join(timeout=10)

    def _spawn_workers(self, checkpoint: Checkpoint | None):
        workers = []
        for stage in self.stages:
            for index in range(stage.parallelism):
                worker = _Worker(self, stage, index, self._assignment(stage, index))
                if checkpoint is not None:
                    offsets = checkpoint.offsets.get(stage.name, {}).get(stage.input_topic, {})
                    mine = {p: offsets[p] for p in worker.partitions if p in offsets}
                    if mine:
                        worker.consumer.seek(mine)
                    state = checkpoint.operator_state.get(stage.name, {}).get(index)
                    if state is not None:
                        worker.processor.restore(state)
                workers.append(worker)
        self.workers = workers
        if checkpoint is not None:
            self._next_checkpoint_id = checkpoint.checkpoint_id + 1
            self._last_checkpoint = checkpoint
        for worker in workers:
            worker.start()

    # barrier checkpointing

    def _pause_all(self) -> bool:
        for worker in self.workers:
            worker.resume_event.clear()
            worker.pause_ack.clear()
            worker.pause_request.set()
        deadline = time.monotonic() + _BARRIER_ACK_TIMEOUT
        for worker in self.workers:
            remaining = deadline - time.monotonic()
            if not worker.pause_ack.wait(max(remaining, 0.0)):
                if worker.is_alive() and worker.state != DEAD:
                    log.warning("worker %s did not reach barrier", worker.worker_id)
                return False
        return True

    def _resume_all(self):
        for worker in self.workers:
            worker.pause_request.clear()
            worker.resume_event.set()

    def checkpoint_now(self) -> Checkpoint | None:
        """Run one barrier checkpoint; returns None if it had to be skipped
        (dead worker, serialization failure, or persistent storage failure)."""
        with self._barrier_lock:
            if any(w.state == DEAD or not w.is_alive() for w in self.workers):
                return None
            if not self._pause_all():
                self._resume_all()
                return None
            try:
                checkpoint = self._build_checkpoint()
                if checkpoint is None:
                    return None
                if not self._persist(checkpoint):
                    return None
                for worker in self.workers:
                    worker.consumer.commit()
                self._last_checkpoint = checkpoint
                self._last_checkpoint_at = time.monotonic()
                self._next_checkpoint_id = checkpoint.checkpoint_id + 1
                self.store.prune(keep=5)
                return checkpoint
            finally:
                self._resume_all()

    def _build_checkpoint(self) -> Checkpoint | None:
        offsets: dict[str, dict[str, dict[int, int]]] = {}
        state: dict[str, dict[int, object]] = {}
        try:
            for worker in self.workers:
                stage_offsets = offsets.setdefault(worker.stage.name, {}).setdefault(
                    worker.stage.input_topic, {})
                stage_offsets.update(worker.consumer.positions())
                snap = worker.processor.snapshot()
                if snap is not None:
                    state.setdefault(worker.stage.name, {})[worker.index] = snap
            checkpoint = Checkpoint(
                checkpoint_id=self._next_checkpoint_id,
                job_id=self.config.job_id,
                offsets=offsets,
                operator_state=state,
            )
            checkpoint.to_json()  # force serialization errors here, not in save
            return checkpoint
        except (TypeError, ValueError) as e:
            self.checkpoint_failures += 1
            log.error("checkpoint serialization failed, continuing from previous: %s", e)
            return None

    def _persist(self, checkpoint: Checkpoint) -> bool:
        delay = 0.05
        for attempt in range(_SAVE_RETRIES):
            try:
                self.store.save(checkpoint)
                return True
            except OSError as e:
                log.error("checkpoint save attempt %d failed: %s", attempt + 1, e)
                time.sleep(delay)
                delay *= 4
        self.checkpoint_failures += 1
        self.storage_alarm = True
        log.error("checkpoint storage failing persistently, raising alarm")
        return False

    # failure handling

    def _monitor_loop(self):
        cfg = self.config
        while not self._stopping.wait(0.2):
            now = time.monotonic()
            failed = [w for w in self.workers
                      if w.state == DEAD
                      or (not w.is_alive() and w.state != STOPPED)
                      or (w.state in (RUNNING, PAUSED)
                          and now - w.heartbeat_ts > cfg.detection_timeout_seconds)]
            if failed:
                detected_at = time.monotonic()
                log.warning("detected failed workers: %s",
                            [w.worker_id for w in failed])
                self._recover(failed, detected_at)
                continue
            if now - self._last_checkpoint_at >= cfg.checkpoint_interval_seconds:
                self.checkpoint_now()
            total = sum(w.processed for w in self.workers)
            self._throughput_samples.append((now, total))

    def _recover(self, failed: list[_Worker], detected_at: float):
        with self._barrier_lock:
            for worker in self.workers:
                worker.kill_flag.set()
                worker.resume_event.set()
            for worker in self.workers:
                worker.join(timeout=10)
            checkpoint = self.store.load_latest()
            self._spawn_workers(checkpoint)
            record = RecoveryRecord(
                failed_workers=[w.worker_id for w in failed],
                failure_detected_at=detected_at,
                restart_complete_at=time.monotonic(),
                checkpoint_id=checkpoint.checkpoint_id if checkpoint else None,
            )
            self.recovery_records.append(record)
            self._last_checkpoint_at = time.monotonic()
            log.info("restored job %s from checkpoint %s in %.3fs",
                     self.config.job_id, record.checkpoint_id,
                     record.restart_complete_at - detected_at)

    def kill_worker(self, stage_name: str, index: int):
        for worker in self.workers:
            if worker.stage.name == stage_name and worker.index == index:
                worker.kill()
                return
        raise KeyError(f"no worker {stage_name}/{index}")

    # observability

    def lag(self) -> dict[str, dict[int, int]]:
        out = {}
        for stage in self.stages:
            try:
                out[stage.name] = self.bus.group_lag(self.group_id(stage), stage.input_topic)
            except KeyError:
                out[stage.name] = {}
        return out

    def total_lag(self) -> int:
        return sum(sum(parts.values()) for parts in self.lag().values())

    def position_lag(self) -> int:
        """Unread records by current read positions (commits lag behind)."""
        total = 0
        for worker in self.workers:
            ends = self.bus.log_end_offsets(worker.stage.input_topic)
            for partition, position in worker.consumer.positions().items():
                total += max(0, ends[partition] - position)
        return total

    def drain(self, timeout: float = 60.0, poll: float = 0.05) -> bool:
        """Wait until every stage has read and processed its whole input.

        Only meaningful once upstream producers have stopped. Verified under
        a barrier so in-flight batches cannot hide behind the check.
        """
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.position_lag() == 0:
                with self._barrier_lock:
                    if any(w.state == DEAD or not w.is_alive() for w in self.workers):
                        time.sleep(poll)
                        continue
                    if not self._pause_all():
                        self._resume_all()
                        continue
                    try:
                        if self.position_lag() == 0:
                            return True
                    finally:
                        self._resume_all()
            time.sleep(poll)
        return False

    def metrics(self) -> dict:
        per_stage = {}
        for stage in self.stages:
            stage_workers = [w for w in self.workers if w.stage.name == stage.name]
            per_stage[stage.name] = {
                "parallelism": stage.parallelism,
                "input_topic": stage.input_topic,
                "processed": sum(w.processed for w in stage_workers),
                "workers": {w.worker_id: w.state for w in stage_workers},
            }
        samples = list(self._throughput_samples)
        rate = 0.0
        if len(samples) >= 2:
            (t0, c0), (t1, c1) = samples[0], samples[-1]
            horizon = time.monotonic() - 10.0
            for ts, count in samples:
                if ts >= horizon:
                    t0, c0 = ts, count
                    break
            if t1 > t0:
                rate = (c1 - c0) / (t1 - t0)
        return {
            "job_id": self.config.job_id,
            "stages": per_stage,
            "lag": {s: dict(parts) for s, parts in self.lag().items()},
            "records_per_second": rate,
            "last_checkpoint_id": self._last_checkpoint.checkpoint_id
                                  if self._last_checkpoint else None,
            "checkpoint_failures": self.checkpoint_failures,
            "storage_alarm": self.storage_alarm,
            "recoveries": len(self.recovery_records),
        }


def measure_throughput(job: JobHandle, window_seconds: float = 30.0) -> dict[str, float]:
    """Committed-offset delta per stage over the window, in records/second.

    Commits advance at checkpoint cadence, so the window should span several
    checkpoint intervals to be meaningful.
    """
    def committed_sum(stage: StageSpec) -> int:
        try:
            return sum(job.bus.group_committed(job.group_id(stage),
                                               stage.input_topic).values())
        except KeyError:
            return 0

    before = {s.name: committed_sum(s) for s in job.stages}
    time.sleep(window_seconds)
    return {s.name: (committed_sum(s) - before[s.name]) / window_seconds
            for s in job.stages}


class FailureInjector:
    """Kills one randomly chosen live worker every ``interval`` seconds."""

    def __init__(self, job: JobHandle, count: int, interval_seconds: float, *,
                 seed: int = 0, first_delay_seconds: float | None = None):
        self.job = job
        self.count = count
        self.interval = interval_seconds
        self.first_delay = (interval_seconds if first_delay_seconds is None
                            else first_delay_seconds)
        self.log: list[dict] = []
        self._rng = Random(seed)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="failure-injector",
                                        daemon=True)

    def start(self) -> "FailureInjector":
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=5)

    def join(self, timeout: float | None = None):
        self._thread.join(timeout)

    def _run(self):
        for i in range(self.count):
            delay = self.first_delay if i == 0 else self.interval
            if self._stop.wait(delay):
                return
            victims = [w for w in self.job.workers
                       if w.is_alive() and w.state in (RUNNING, PAUSED)]
            if not victims:
                continue
            victim = self._rng.choice(victims)
            victim.kill()
            self.log.append({"at": time.monotonic(), "worker": victim.worker_id})
            log.info("injected failure: killed %s", victim.worker_id)
