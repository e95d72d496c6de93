"""Gradient bandits for CPU and memory sizing.

A bandit keeps one preference per arm and picks arms from the softmax of
those preferences. After each pull the chosen arm's preference moves by
``alpha * (R - R_bar) * (1 - pi)`` and every other arm's by
``-alpha * (R - R_bar) * pi``, where ``R_bar`` is the running mean of all
rewards seen before this one.

The CPU bandit's arms are core counts; its reward charges runtime plus idle
core time and its step size is the reciprocal of the mean observed runtime.
The memory bandit's arms are multiples of a chunk (the task's default
memory split into ``n`` pieces); its reward charges unused chunks, or twice
the assigned chunks when the task was OOM-killed, with step size ``1/n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import (
    ExecutionOutcome,
    MachineSpec,
    ResourceAlloc,
    SizingError,
    Status,
    TaskProfile,
    ValidationError,
    cpu_unused,
)

SNAPSHOT_VERSION = 1
# CPU arms run 1..ceil(default cores * factor), clamped to the machine
DEFAULT_CPU_CAP_FACTOR = 1.5


class NoObservations(SizingError):
    """The CPU step size was requested before any runtime was observed."""


class OutOfRange(SizingError, ValueError):
    pass


@dataclass
class GradientBanditState:
    actions: list[int]
    preferences: np.ndarray = None
    reward_baseline: float = 0.0
    updates_seen: int = 0
    runtime_sum_s: float = 0.0
    runtime_count: int = 0

    def __post_init__(self):
        if len(self.actions) < 2:
            raise ValidationError("a gradient bandit needs at least two arms")
        if self.preferences is None:
            self.preferences = np.zeros(len(self.actions))
        else:
            self.preferences = np.asarray(self.preferences, dtype=np.float64).copy()
        if self.preferences.shape != (len(self.actions),):
            raise ValidationError("one preference per arm is required")
        if not np.all(np.isfinite(self.preferences)):
            raise ValidationError("preferences must be finite")

    def greedy(self) -> int:
        return int(np.argmax(self.preferences))

    def to_snapshot(self) -> dict:
        return {
            "schema_version": SNAPSHOT_VERSION,
            "actions": [int(a) for a in self.actions],
            "preferences": [float(h) for h in self.preferences],
            "reward_baseline": float(self.reward_baseline),
            "updates_seen": int(self.updates_seen),
            "runtime_sum_s": float(self.runtime_sum_s),
            "runtime_count": int(self.runtime_count),
        }

    @classmethod
    def from_snapshot(cls, doc: dict) -> GradientBanditState:
        if doc.get("schema_version") != SNAPSHOT_VERSION:
            raise ValidationError(f"unsupported bandit snapshot version {doc.get('schema_version')!r}")
        return cls(
            actions=list(doc["actions"]),
            preferences=np.array(doc["preferences"], dtype=np.float64),
            reward_baseline=doc["reward_baseline"],
            updates_seen=doc["updates_seen"],
            runtime_sum_s=doc["runtime_sum_s"],
            runtime_count=doc["runtime_count"],
        )


def policy(state: GradientBanditState) -> np.ndarray:
    return _kernels.softmax(state.preferences)


def sample_action(state: GradientBanditState, rng: np.random.Generator) -> int:
    """Draw an arm index from the current policy. Consumes exactly one uniform."""
    return int(_kernels.sample_index(state.preferences, rng.random()))


def update_preferences(
    state: GradientBanditState, chosen: int, reward: float, step: float
) -> GradientBanditState:
    if not 0 <= chosen < len(state.actions):
        raise OutOfRange(f"arm {chosen} outside 0..{len(state.actions) - 1}")
    if not math.isfinite(reward) or step <= 0:
        raise ValueError("reward must be finite and step positive")
    # baseline from before this reward, folded in afterwards; the first
    # reward seeds the baseline so the opening pull has zero advantage
    if state.updates_seen == 0:
        state.reward_baseline = reward
    _kernels.preference_step(state.preferences, chosen, step * (reward - state.reward_baseline))
    state.updates_seen += 1
    state.reward_baseline += (reward - state.reward_baseline) / state.updates_seen
    return state


# -- CPU bandit ---------------------------------------------------------------


def cpu_reward(alloc: ResourceAlloc, outcome: ExecutionOutcome) -> float:
    """Runtime plus idle core-seconds, negated."""
    return -outcome.runtime_s * (1.0 + cpu_unused(alloc, outcome))


def cpu_step_size(state: GradientBanditState) -> float:
    if state.runtime_count == 0:
        raise NoObservations("no runtime observed yet for this agent")
    return state.runtime_count / state.runtime_sum_s


def cpu_actions(default: ResourceAlloc, machine: MachineSpec, cap_factor: float = DEFAULT_CPU_CAP_FACTOR) -> list[int]:
    top = min(machine.total_cores, max(2, int(math.ceil(default.cpus * cap_factor))))
    if top < 2:
        raise ValidationError(f"machine {machine.name!r} has a single core; nothing to choose")
    return list(range(1, top + 1))


# -- memory bandit ------------------------------------------------------------


@dataclass(frozen=True)
class MemoryBanditConfig:
    n_chunks: int
    chunk_bytes: int
    initial_action: int

    def __post_init__(self):
        if self.n_chunks < 2 or self.chunk_bytes < 1:
            raise ValidationError("memory bandit needs n >= 2 chunks of at least one byte")
        if not 1 <= self.initial_action <= self.n_chunks:
            raise ValidationError("initial action must lie in 1..n")

    @classmethod
    def from_default(cls, default_mem_bytes: int, n_chunks: int = 10, initial_action: int | None = None):
        if initial_action is None:
            initial_action = math.ceil(n_chunks / 2)
        return cls(n_chunks, max(1, default_mem_bytes // n_chunks), initial_action)


def mem_action_to_bytes(action: int, config: MemoryBanditConfig) -> int:
    if not 1 <= action <= config.n_chunks:
        raise OutOfRange(f"memory action {action} outside 1..{config.n_chunks}")
    return action * config.chunk_bytes


def mem_reward(mem_asg: int, outcome: ExecutionOutcome, config: MemoryBanditConfig) -> float:
    if mem_asg <= 0:
        raise ValueError("assigned memory must be positive")
    c = config.chunk_bytes
    if outcome.status is Status.OOM:
        return -2.0 * mem_asg / c
    return -(mem_asg - outcome.peak_rss_bytes) / c


def mem_step_size(config: MemoryBanditConfig | int) -> float:
    """``1/n``; accepts a config or the chunk count itself."""
    n = config if isinstance(config, int) else config.n_chunks
    if n < 1:
        raise ValueError("chunk count must be positive")
    return 1.0 / n


def nearest_action(mem_bytes: int, config: MemoryBanditConfig) -> int:
    """Arm whose allocation is closest to ``mem_bytes``; ties go to the larger arm."""
    q = mem_bytes / config.chunk_bytes
    lo = math.floor(q)
    a = lo + 1 if q - lo >= 0.5 else lo
    return min(config.n_chunks, max(1, a))


@dataclass
class OomEscalator:
    failed_alloc_bytes: int
    task_default_bytes: int

    def record_failure(self, mem_bytes: int) -> None:
        self.failed_alloc_bytes = max(self.failed_alloc_bytes, mem_bytes)


def escalate_after_oom(escalator: OomEscalator, bandit_proposal_bytes: int) -> int:
    """Next memory allocation after an OOM kill.

    A proposal above the failed allocation is taken as is. A smaller one is
    doubled if that clears the failure, otherwise the task default is used.
    """
    failed = escalator.failed_alloc_bytes
    if failed <= 0:
        raise ValueError("escalation needs a failed allocation")
    p = bandit_proposal_bytes
    if p > failed:
        return p
    if 2 * p > failed:
        return 2 * p
    return escalator.task_default_bytes


# -- composed agent -----------------------------------------------------------


@dataclass
class BanditAgent:
    """CPU bandit plus memory bandit for one (task, machine) pair."""

    task: TaskProfile
    machine: MachineSpec
    cpu: GradientBanditState
    mem: GradientBanditState
    mem_config: MemoryBanditConfig
    _pending: tuple[int, int] | None = field(default=None, repr=False)
    _escalator: OomEscalator | None = field(default=None, repr=False)
    _proposals: int = field(default=0, repr=False)

    @classmethod
    def create(cls, task: TaskProfile, machine: MachineSpec, n_chunks: int = 10,
               cpu_cap_factor: float = DEFAULT_CPU_CAP_FACTOR, initial_action: int | None = None) -> BanditAgent:
        cfg = MemoryBanditConfig.from_default(task.default_alloc.mem_bytes, n_chunks, initial_action)
        cpu = GradientBanditState(cpu_actions(task.default_alloc, machine, cpu_cap_factor))
        mem = GradientBanditState(list(range(1, cfg.n_chunks + 1)))
        return cls(task, machine, cpu, mem, cfg)

    def propose(self, rng: np.random.Generator) -> ResourceAlloc:
        ci = sample_action(self.cpu, rng)
        if self._proposals == 0:
            mi = self.mem_config.initial_action - 1
        else:
            mi = sample_action(self.mem, rng)
        self._proposals += 1
        self._pending = (ci, mi)
        self._escalator = None
        mem = min(mem_action_to_bytes(mi + 1, self.mem_config), self.machine.total_mem_bytes)
        return ResourceAlloc(self.cpu.actions[ci], mem)

    def observe(self, alloc: ResourceAlloc, outcome: ExecutionOutcome, attempt: int):
        """Learn from one attempt. Returns ``(memory_reward, cpu_reward)``."""
        ci, mi = self._pending
        if attempt > 1:
            mi = nearest_action(alloc.mem_bytes, self.mem_config) - 1
        n = self.mem_config.n_chunks
        r_mem = min(0.0, max(-2.0 * n, mem_reward(alloc.mem_bytes, outcome, self.mem_config)))
        update_preferences(self.mem, mi, r_mem, mem_step_size(self.mem_config))
        r_cpu = None
        if outcome.ok:
            self.cpu.runtime_sum_s += outcome.runtime_s
            self.cpu.runtime_count += 1
            r_cpu = cpu_reward(alloc, outcome)
            update_preferences(self.cpu, self.cpu.actions.index(alloc.cpus), r_cpu, cpu_step_size(self.cpu))
        return r_mem, r_cpu

    def retry(self, failed: ResourceAlloc, rng: np.random.Generator) -> ResourceAlloc | None:
        if self._escalator is None:
            self._escalator = OomEscalator(failed.mem_bytes, self.task.default_alloc.mem_bytes)
        else:
            self._escalator.record_failure(failed.mem_bytes)
        proposal = mem_action_to_bytes(sample_action(self.mem, rng) + 1, self.mem_config)
        nxt = escalate_after_oom(self._escalator, proposal)
        if nxt <= self._escalator.failed_alloc_bytes:
            nxt = self.machine.total_mem_bytes
        nxt = min(nxt, self.machine.total_mem_bytes)
        if nxt <= self._escalator.failed_alloc_bytes:
            return None
        return ResourceAlloc(failed.cpus, nxt)

    def greedy_alloc(self) -> ResourceAlloc:
        return ResourceAlloc(self.cpu.actions[self.cpu.greedy()],
                             mem_action_to_bytes(self.mem.greedy() + 1, self.mem_config))

    def to_snapshot(self) -> dict:
        return {
            "schema_version": SNAPSHOT_VERSION,
            "kind": "bandits",
            "cpu": self.cpu.to_snapshot(),
            "memory": self.mem.to_snapshot(),
            "n_chunks": self.mem_config.n_chunks,
            "chunk_bytes": self.mem_config.chunk_bytes,
            "initial_action": self.mem_config.initial_action,
            "proposals": self._proposals,
        }

    @classmethod
    def from_snapshot(cls, doc: dict, task: TaskProfile, machine: MachineSpec) -> BanditAgent:
        cfg = MemoryBanditConfig(doc["n_chunks"], doc["chunk_bytes"], doc["initial_action"])
        agent = cls(task, machine, GradientBanditState.from_snapshot(doc["cpu"]),
                    GradientBanditState.from_snapshot(doc["memory"]), cfg)
        agent._proposals = doc.get("proposals", 0)
        return agent
