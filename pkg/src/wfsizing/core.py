"""Domain types and the usage/wastage primitives shared by rewards and metrics.

Units: cores for CPU, bytes for memory, seconds for time. Metric reporting
converts to core-hours and GB-hours with GB = 10**9 bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

GB = 10**9
GiB = 2**30
MiB = 2**20


class SizingError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(SizingError, ValueError):
    pass


class Status(str, enum.Enum):
    SUCCESS = "success"
    OOM = "oom"


@dataclass(frozen=True)
class ResourceAlloc:
    cpus: int
    mem_bytes: int

    def __post_init__(self):
        if self.cpus < 1:
            raise ValidationError(f"cpus must be >= 1, got {self.cpus}")
        if self.mem_bytes < 1:
            raise ValidationError(f"mem_bytes must be >= 1, got {self.mem_bytes}")

    def fits(self, machine: MachineSpec) -> bool:
        return self.cpus <= machine.total_cores and self.mem_bytes <= machine.total_mem_bytes


@dataclass(frozen=True)
class MachineSpec:
    name: str
    total_cores: int
    total_mem_bytes: int

    def __post_init__(self):
        if self.total_cores < 1 or self.total_mem_bytes < 1:
            raise ValidationError(f"machine {self.name!r} needs positive capacity")


@dataclass(frozen=True)
class TaskProfile:
    workflow: str
    task_name: str
    default_alloc: ResourceAlloc
    behavior_ref: str


@dataclass(frozen=True, order=True)
class AgentKey:
    task_name: str
    machine_name: str

    def __str__(self):
        return f"{self.task_name}@{self.machine_name}"


@dataclass(frozen=True)
class ExecutionOutcome:
    runtime_s: float
    cpu_usage_pct: float
    peak_rss_bytes: int
    status: Status = Status.SUCCESS

    def __post_init__(self):
        if self.runtime_s < 0 or self.cpu_usage_pct < 0 or self.peak_rss_bytes < 0:
            raise ValidationError("outcome fields must be non-negative")
        if self.status is Status.SUCCESS and self.runtime_s <= 0:
            raise ValidationError("a successful attempt needs a positive runtime")

    @property
    def ok(self) -> bool:
        return self.status is Status.SUCCESS

    @property
    def used_cores(self) -> float:
        return self.cpu_usage_pct / 100.0


@dataclass(frozen=True)
class TraceRecord:
    workflow: str
    task_name: str
    machine_name: str
    input_size_bytes: int
    alloc: ResourceAlloc
    outcome: ExecutionOutcome


def cpu_unused(alloc: ResourceAlloc, outcome: ExecutionOutcome) -> float:
    """Allocated minus used cores. Negative when the task used more than it was given."""
    return alloc.cpus - outcome.cpu_usage_pct / 100.0


def mem_utilization(alloc: ResourceAlloc, outcome: ExecutionOutcome) -> float:
    return outcome.peak_rss_bytes / alloc.mem_bytes


def cpu_hours(cores: float, runtime_s: float) -> float:
    return cores * runtime_s / 3600.0


def mem_gbh(mem_bytes: float, runtime_s: float) -> float:
    return (mem_bytes / GB) * runtime_s / 3600.0
