"""Fine-tune job queue: one active job at a time, status polled by id."""

from __future__ import annotations

import threading
import traceback
from dataclasses import dataclass, field
from typing import Callable, Optional

QUEUED, RUNNING, DONE, FAILED = "queued", "running", "done", "failed"


@dataclass
class JobRecord:
    job_id: str
    status: str = QUEUED
    losses: list[float] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    error: Optional[str] = None

    def snapshot(self) -> dict:
        return {
            "job_id": self.job_id,
            "status": self.status,
            "losses": list(self.losses),
            "checkpoints": dict(self.checkpoints),
            "config": dict(self.config),
            "error": self.error,
        }


class BusyError(RuntimeError):
    """Another job is already queued or running."""


class JobRegistry:
    """Single-writer job execution; snapshots are safe from any thread."""

    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, JobRecord] = {}
        self._active: Optional[str] = None
        self._counter = 0

    def submit(self, work: Callable[[JobRecord], None], config: Optional[dict] = None) -> JobRecord:
        with self._lock:
            if self._active is not None:
                raise BusyError(f"job {self._active} is still active")
            self._counter += 1
            record = JobRecord(job_id=f"job-{self._counter}", config=dict(config or {}))
            self._jobs[record.job_id] = record
            self._active = record.job_id

        def runner():
            record.status = RUNNING
            try:
                work(record)
                record.status = DONE
            except Exception as exc:  # job failures are reported, not raised
                record.error = f"{exc}\n{traceback.format_exc(limit=3)}"
                record.status = FAILED
            finally:
                with self._lock:
                    self._active = None

        threading.Thread(target=runner, name=record.job_id, daemon=True).start()
        return record

    def get(self, job_id: str) -> Optional[JobRecord]:
        return self._jobs.get(job_id)
