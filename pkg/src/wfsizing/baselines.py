"""Comparison strategies: the static default configuration and the feedback loop.

The feedback loop gives every task the whole machine for a number of
training runs, records per-task usage, and afterwards allocates the mean
plus one standard deviation of what it saw. A task killed for memory is
retried with the largest peak observed in training, then twice that, then
the whole machine.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .core import ExecutionOutcome, MachineSpec, ResourceAlloc, SizingError, TaskProfile, ValidationError

SNAPSHOT_VERSION = 1


class NoTrainingData(SizingError):
    pass


class Phase(str, enum.Enum):
    TRAINING = "training"
    PREDICTING = "predicting"


@dataclass
class RunningMoments:
    """Welford accumulator; ``std`` is the sample standard deviation."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        if self.count < 2:
            return 0.0
        return math.sqrt(self.m2 / (self.count - 1))


@dataclass
class FeedbackStats:
    cpu: RunningMoments = field(default_factory=RunningMoments)
    rss: RunningMoments = field(default_factory=RunningMoments)
    max_peak_rss_bytes: int = 0
    phase: Phase = Phase.TRAINING

    @property
    def count(self) -> int:
        return self.cpu.count

    def record(self, outcome: ExecutionOutcome) -> None:
        self.cpu.push(outcome.used_cores)
        self.rss.push(float(outcome.peak_rss_bytes))
        self.max_peak_rss_bytes = max(self.max_peak_rss_bytes, outcome.peak_rss_bytes)

    def to_snapshot(self) -> dict:
        return {
            "schema_version": SNAPSHOT_VERSION,
            "kind": "feedback",
            "phase": self.phase.value,
            "cpu": {"count": self.cpu.count, "mean": self.cpu.mean, "m2": self.cpu.m2},
            "rss": {"count": self.rss.count, "mean": self.rss.mean, "m2": self.rss.m2},
            "max_peak_rss_bytes": self.max_peak_rss_bytes,
        }

    @classmethod
    def from_snapshot(cls, doc: dict) -> FeedbackStats:
        if doc.get("schema_version") != SNAPSHOT_VERSION:
            raise ValidationError(f"unsupported feedback snapshot version {doc.get('schema_version')!r}")
        return cls(RunningMoments(**doc["cpu"]), RunningMoments(**doc["rss"]),
                   doc["max_peak_rss_bytes"], Phase(doc["phase"]))


def default_alloc(task: TaskProfile) -> ResourceAlloc:
    return task.default_alloc


def feedback_alloc(stats: FeedbackStats, machine: MachineSpec, use_std: bool = True) -> ResourceAlloc:
    if stats.phase is Phase.TRAINING:
        return ResourceAlloc(machine.total_cores, machine.total_mem_bytes)
    if stats.count == 0:
        raise NoTrainingData("feedback loop has no training observations for this task")
    k = 1.0 if use_std else 0.0
    cpus = math.ceil(stats.cpu.mean + k * stats.cpu.std)
    mem = math.ceil(stats.rss.mean + k * stats.rss.std)
    return ResourceAlloc(min(max(cpus, 1), machine.total_cores), min(max(mem, 1), machine.total_mem_bytes))


def feedback_retry(stats: FeedbackStats, attempt: int, machine: MachineSpec) -> int:
    """Memory for the ``attempt``-th retry after an OOM kill (1-based)."""
    if attempt < 1:
        raise ValueError("retry attempts count from 1")
    if attempt == 1:
        mem = stats.max_peak_rss_bytes
    elif attempt == 2:
        mem = 2 * stats.max_peak_rss_bytes
    else:
        mem = machine.total_mem_bytes
    return min(max(mem, 1), machine.total_mem_bytes)


@dataclass
class DefaultAgent:
    task: TaskProfile
    machine: MachineSpec

    def propose(self, rng=None) -> ResourceAlloc:
        return default_alloc(self.task)

    def observe(self, alloc, outcome, attempt):
        return None

    def retry(self, failed: ResourceAlloc, rng=None) -> ResourceAlloc | None:
        # the declared defaults carry no retry rule; double until the machine is full
        mem = min(2 * failed.mem_bytes, self.machine.total_mem_bytes)
        return ResourceAlloc(failed.cpus, mem) if mem > failed.mem_bytes else None

    def to_snapshot(self) -> dict:
        return {"schema_version": SNAPSHOT_VERSION, "kind": "default",
                "cpus": self.task.default_alloc.cpus, "mem_bytes": self.task.default_alloc.mem_bytes}


@dataclass
class FeedbackLoopAgent:
    task: TaskProfile
    machine: MachineSpec
    training_runs: int = 10
    use_std: bool = True
    stats: FeedbackStats = field(default_factory=FeedbackStats)
    _retries: int = field(default=0, repr=False)

    def begin_episode(self, episode: int) -> None:
        if episode >= self.training_runs:
            self.stats.phase = Phase.PREDICTING

    def propose(self, rng=None) -> ResourceAlloc:
        self._retries = 0
        return feedback_alloc(self.stats, self.machine, self.use_std)

    def observe(self, alloc, outcome: ExecutionOutcome, attempt):
        if self.stats.phase is Phase.TRAINING and outcome.ok:
            self.stats.record(outcome)
        return None

    def retry(self, failed: ResourceAlloc, rng=None) -> ResourceAlloc | None:
        if failed.mem_bytes >= self.machine.total_mem_bytes:
            return None
        self._retries += 1
        return ResourceAlloc(failed.cpus, feedback_retry(self.stats, self._retries, self.machine))

    def to_snapshot(self) -> dict:
        return self.stats.to_snapshot()

