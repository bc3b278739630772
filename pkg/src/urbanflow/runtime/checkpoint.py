"""Durable job checkpoints: input offsets plus operator state, atomically.

A checkpoint is one file, written to a temp name and renamed into place, so
a crash mid-write can never leave a loadable half checkpoint. Load walks ids
from the highest down and skips anything unreadable or failing validation,
which covers both torn files from pre-rename crashes and stray corruption.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

FORMAT_NAME = "urbanflow-checkpoint"
FORMAT_VERSION = 1

_FILE_PREFIX = "chk-"
_FILE_SUFFIX = ".bin"


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    checkpoint_id: int
    job_id: str
    # offsets[stage][topic][partition] = next offset to read
    offsets: dict[str, dict[str, dict[int, int]]]
    # operator_state[stage][worker_index] = opaque JSON-able state
    operator_state: dict[str, dict[int, object]]
    created_at: float = field(default_factory=time.time)

    def to_json(self) -> bytes:
        return json.dumps({
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "checkpoint_id": self.checkpoint_id,
            "job_id": self.job_id,
            "offsets": {
                stage: {topic: {str(p): o for p, o in parts.items()}
                        for topic, parts in topics.items()}
                for stage, topics in self.offsets.items()
            },
            "operator_state": {
                stage: {str(i): state for i, state in workers.items()}
                for stage, workers in self.operator_state.items()
            },
            "created_at": self.created_at,
        }, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, data: bytes) -> "Checkpoint":
        d = json.loads(data)
        if d.get("format") != FORMAT_NAME:
            raise CheckpointError(f"unrecognized format {d.get('format')!r}")
        if d.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported version {d.get('version')!r}")
        return cls(
            checkpoint_id=int(d["checkpoint_id"]),
            job_id=d["job_id"],
            offsets={
                stage: {topic: {int(p): int(o) for p, o in parts.items()}
                        for topic, parts in topics.items()}
                for stage, topics in d["offsets"].items()
            },
            operator_state={
                stage: {int(i): state for i, state in workers.items()}
                for stage, workers in d["operator_state"].items()
            },
            created_at=float(d["created_at"]),
        )


class CheckpointStore:
    def __init__(self, root_dir: str, job_id: str):
        self.dir = os.path.join(root_dir, job_id)
        os.makedirs(self.dir, exist_ok=True)

    def _path(self, checkpoint_id: int) -> str:
        return os.path.join(self.dir, f"{_FILE_PREFIX}{checkpoint_id:012d}{_FILE_SUFFIX}")

    def save(self, checkpoint: Checkpoint) -> str:
        path = self._path(checkpoint.checkpoint_id)
        tmp = path + ".tmp"
        data = checkpoint.to_json()
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return path

    def list_ids(self) -> list[int]:
        ids = []
        for name in os.listdir(self.dir):
            if name.startswith(_FILE_PREFIX) and name.endswith(_FILE_SUFFIX):
                try:
                    ids.append(int(name[len(_FILE_PREFIX):-len(_FILE_SUFFIX)]))
                except ValueError:
                    continue
        ids.sort()
        return ids

    def load(self, checkpoint_id: int) -> Checkpoint:
        with open(self._path(checkpoint_id), "rb") as fh:
            return Checkpoint.from_json(fh.read())

    def load_latest(self) -> Checkpoint | None:
        """Newest checkpoint that parses and validates; damaged ones are skipped."""
        for checkpoint_id in reversed(self.list_ids()):
            try:
                return self.load(checkpoint_id)
            except (OSError, ValueError, KeyError, CheckpointError) as e:
                log.warning("skipping unreadable checkpoint %d: %s", checkpoint_id, e)
        return None

    def prune(self, keep: int = 5):
        ids = self.list_ids()
        for checkpoint_id in ids[:-keep] if keep else ids:
            try:
                os.unlink(self._path(checkpoint_id))
            except OSError:
                pass
