from .checkpoint import Checkpoint, CheckpointError, CheckpointStore
from .supervisor import (DEAD, PAUSED, RUNNING, STOPPED, FailureInjector,
                         JobConfig, JobHandle, Processor, RecoveryRecord,
                         StageSpec, measure_throughput)

__all__ = [
    "Checkpoint", "CheckpointError", "CheckpointStore",
    "JobConfig", "JobHandle", "Processor", "RecoveryRecord", "StageSpec",
    "FailureInjector", "measure_throughput",
    "RUNNING", "PAUSED", "STOPPED", "DEAD",
]
