"""Tabular Q-learning over joint (CPU level, memory level) allocations.

The state is the allocation the task currently runs with. Each step moves
one of the two indices by one level or stays put, runs the task at the new
allocation and backs up the observed reward. The reward multiplies floored
idle cores, the slowdown against the task's mean runtime, and floored
unused memory, so a well-fitted allocation costs close to nothing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import _kernels
from .bandit import DEFAULT_CPU_CAP_FACTOR, OomEscalator, cpu_actions, escalate_after_oom
from .core import (
    GB,
    ExecutionOutcome,
    MachineSpec,
    ResourceAlloc,
    TaskProfile,
    ValidationError,
    cpu_unused,
    mem_utilization,
)

SNAPSHOT_VERSION = 1
CPU_WASTE_FLOOR = 0.1
MEM_USE_CAP = 0.75
# memory in the reward is measured in decimal GB
MEM_REWARD_UNIT = GB


class QAction(enum.IntEnum):
    INC_CPU = 0
    DEC_CPU = 1
    INC_MEM = 2
    DEC_MEM = 3
    NOOP = 4


class QState(NamedTuple):
    cpu_idx: int
    mem_idx: int


@dataclass(frozen=True)
class QConfig:
    learning_rate: float = 0.1
    discount: float = 0.5
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 70
    cpu_levels: tuple[int, ...] = (1, 2)
    mem_levels: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValidationError("learning_rate must lie in (0, 1]")
        if not 0 <= self.discount < 1:
            raise ValidationError("discount must lie in [0, 1)")
        if not (0 <= self.epsilon_end <= self.epsilon_start <= 1):
            raise ValidationError("need 0 <= epsilon_end <= epsilon_start <= 1")
        for name in ("cpu_levels", "mem_levels"):
            levels = getattr(self, name)
            if len(levels) < 2 or any(b <= a for a, b in zip(levels, levels[1:])):
                raise ValidationError(f"{name} must be strictly increasing with at least two levels")

    def epsilon(self, episode: int) -> float:
        """Linear decay from start to end over the decay window, then flat."""
        if self.epsilon_decay_episodes <= 0 or episode >= self.epsilon_decay_episodes:
            return self.epsilon_end
        frac = episode / self.epsilon_decay_episodes
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac

    def alloc(self, s: QState) -> ResourceAlloc:
        return ResourceAlloc(self.cpu_levels[s.cpu_idx], self.mem_levels[s.mem_idx])


@dataclass
class QTable:
    values: np.ndarray
    visit_counts: np.ndarray

    @classmethod
    def zeros(cls, n_cpu: int, n_mem: int) -> QTable:
        shape = (n_cpu, n_mem, len(QAction))
        return cls(np.zeros(shape), np.zeros(shape, dtype=np.int64))

    def row(self, s: QState) -> np.ndarray:
        return self.values[s.cpu_idx, s.mem_idx]

    def __getitem__(self, key):
        s, a = key
        return float(self.values[s.cpu_idx, s.mem_idx, int(a)])


def legal_mask(s: QState, n_cpu: int, n_mem: int) -> np.ndarray:
    return np.array([
        s.cpu_idx < n_cpu - 1,
        s.cpu_idx > 0,
        s.mem_idx < n_mem - 1,
        s.mem_idx > 0,
        True,
    ])


def q_reward(alloc: ResourceAlloc, outcome: ExecutionOutcome, avg_t_s: float) -> float:
    if avg_t_s <= 0:
        raise ValueError("average runtime must be positive")
    cpu_waste = max(CPU_WASTE_FLOOR, cpu_unused(alloc, outcome))
    slowdown = outcome.runtime_s / avg_t_s
    mem_waste = (alloc.mem_bytes / MEM_REWARD_UNIT) * (1.0 - min(MEM_USE_CAP, mem_utilization(alloc, outcome)))
    return -cpu_waste * slowdown * mem_waste


def q_reward_oom(alloc: ResourceAlloc, avg_t_s: float) -> float:
    """Penalty for an OOM-killed attempt: twice the worst success penalty at unit slowdown."""
    if avg_t_s <= 0:
        raise ValueError("average runtime must be positive")
    return -2.0 * max(CPU_WASTE_FLOOR, alloc.cpus) * (alloc.mem_bytes / MEM_REWARD_UNIT)


def select_action(table: QTable, s: QState, epsilon: float, rng: np.random.Generator | None) -> QAction:
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    n_cpu, n_mem, _ = table.values.shape
    mask = legal_mask(s, n_cpu, n_mem)
    if epsilon > 0 and rng.random() < epsilon:
        legal = np.flatnonzero(mask)
        return QAction(int(legal[rng.integers(len(legal))]))
    return QAction(_kernels.masked_argmax(table.row(s), mask))


def q_update(table: QTable, s: QState, a: QAction, r: float, s_next: QState, cfg: QConfig) -> QTable:
    n_cpu, n_mem, _ = table.values.shape
    _kernels.q_backup(
        table.values, s.cpu_idx, s.mem_idx, int(a), float(r),
        s_next.cpu_idx, s_next.mem_idx, legal_mask(s_next, n_cpu, n_mem),
        cfg.learning_rate, cfg.discount,
    )
    table.visit_counts[s.cpu_idx, s.mem_idx, int(a)] += 1
    return table


def apply_action(s: QState, a: QAction, cfg: QConfig) -> QState:
    ci, mi = s
    if a is QAction.INC_CPU:
        ci += 1
    elif a is QAction.DEC_CPU:
        ci -= 1
    elif a is QAction.INC_MEM:
        mi += 1
    elif a is QAction.DEC_MEM:
        mi -= 1
    ci = min(max(ci, 0), len(cfg.cpu_levels) - 1)
    mi = min(max(mi, 0), len(cfg.mem_levels) - 1)
    return QState(ci, mi)


def greedy_absorbing_state(table: QTable, start: QState, cfg: QConfig) -> QState | None:
    """Follow greedy actions from ``start`` until a no-op; ``None`` if the walk cycles."""
    s = start
    seen = {s}
    while True:
        a = select_action(table, s, 0.0, None)
        nxt = apply_action(s, a, cfg)
        if nxt == s:
            return s
        if nxt in seen:
            return None
        seen.add(nxt)
        s = nxt


def level_config(task: TaskProfile, machine: MachineSpec, base: QConfig, n_chunks: int = 10,
                 cpu_cap_factor: float = DEFAULT_CPU_CAP_FACTOR) -> QConfig:
    """Level lists shared with the bandits: core counts and memory chunk multiples."""
    chunk = max(1, task.default_alloc.mem_bytes // n_chunks)
    mem_levels = tuple(min(a * chunk, machine.total_mem_bytes) for a in range(1, n_chunks + 1))
    mem_levels = tuple(sorted(set(mem_levels)))
    return replace(base, cpu_levels=tuple(cpu_actions(task.default_alloc, machine, cpu_cap_factor)),
                   mem_levels=mem_levels)


def _nearest_index(levels, value) -> int:
    return int(np.argmin([abs(v - value) for v in levels]))


@dataclass
class QAgent:
    task: TaskProfile
    machine: MachineSpec
    config: QConfig
    table: QTable
    state: QState
    runtime_sum_s: float = 0.0
    runtime_count: int = 0
    episode: int = 0
    _pending: tuple[QState, QAction, QState] | None = field(default=None, repr=False)
    _escalator: OomEscalator | None = field(default=None, repr=False)

    @classmethod
    def create(cls, task: TaskProfile, machine: MachineSpec, config: QConfig) -> QAgent:
        d = task.default_alloc
        start = QState(_nearest_index(config.cpu_levels, d.cpus), _nearest_index(config.mem_levels, d.mem_bytes))
        return cls(task, machine, config, QTable.zeros(len(config.cpu_levels), len(config.mem_levels)), start)

    @property
    def avg_runtime_s(self) -> float:
        return self.runtime_sum_s / self.runtime_count if self.runtime_count else math.nan

    def begin_episode(self, episode: int) -> None:
        self.episode = episode

    def propose(self, rng: np.random.Generator) -> ResourceAlloc:
        a = select_action(self.table, self.state, self.config.epsilon(self.episode), rng)
        nxt = apply_action(self.state, a, self.config)
        self._pending = (self.state, a, nxt)
        self._escalator = None
        return self.config.alloc(nxt)

    def observe(self, alloc: ResourceAlloc, outcome: ExecutionOutcome, attempt: int):
        if outcome.ok:
            self.runtime_sum_s += outcome.runtime_s
            self.runtime_count += 1
        if attempt > 1:
            return None
        s, a, nxt = self._pending
        if outcome.ok:
            r = q_reward(alloc, outcome, self.avg_runtime_s)
        else:
            r = q_reward_oom(alloc, self.avg_runtime_s if self.runtime_count else 1.0)
        q_update(self.table, s, a, r, nxt, self.config)
        self.state = nxt
        return r

    def retry(self, failed: ResourceAlloc, rng: np.random.Generator) -> ResourceAlloc | None:
        if self._escalator is None:
            self._escalator = OomEscalator(failed.mem_bytes, self.task.default_alloc.mem_bytes)
        else:
            self._escalator.record_failure(failed.mem_bytes)
        failed_bytes = self._escalator.failed_alloc_bytes
        target = escalate_after_oom(self._escalator, failed.mem_bytes)
        if target <= failed_bytes:
            target = self.machine.total_mem_bytes
        levels = self.config.mem_levels
        above = [i for i, v in enumerate(levels) if v >= target]
        if above:
            mi = above[0]
            mem = levels[mi]
        else:
            mi = len(levels) - 1
            mem = min(target, self.machine.total_mem_bytes)
        self.state = QState(self.state.cpu_idx, mi)
        if mem <= failed_bytes:
            return None
        return ResourceAlloc(failed.cpus, mem)

    def greedy_alloc(self) -> ResourceAlloc:
        s = greedy_absorbing_state(self.table, self.state, self.config) or self.state
        return self.config.alloc(s)

    def to_snapshot(self) -> dict:
        triples, visits = [], []
        for ci, mi, a in zip(*np.nonzero(self.table.visit_counts)):
            name = QAction(int(a)).name
            triples.append([int(ci), int(mi), name, float(self.table.values[ci, mi, a])])
            visits.append([int(ci), int(mi), name, int(self.table.visit_counts[ci, mi, a])])
        return {
            "schema_version": SNAPSHOT_VERSION,
            "kind": "qlearning",
            "cpu_levels": list(self.config.cpu_levels),
            "mem_levels": list(self.config.mem_levels),
            "q_values": triples,
            "visit_counts": visits,
            "avg_t": {"runtime_sum_s": self.runtime_sum_s, "runtime_count": self.runtime_count},
            "state": [self.state.cpu_idx, self.state.mem_idx],
            "episode": self.episode,
        }

    @classmethod
    def from_snapshot(cls, doc: dict, task: TaskProfile, machine: MachineSpec, base: QConfig) -> QAgent:
        if doc.get("schema_version") != SNAPSHOT_VERSION:
            raise ValidationError(f"unsupported Q snapshot version {doc.get('schema_version')!r}")
        cfg = replace(base, cpu_levels=tuple(doc["cpu_levels"]), mem_levels=tuple(doc["mem_levels"]))
        table = QTable.zeros(len(cfg.cpu_levels), len(cfg.mem_levels))
        for ci, mi, name, v in doc["q_values"]:
            table.values[ci, mi, QAction[name]] = v
        for ci, mi, name, n in doc["visit_counts"]:
            table.visit_counts[ci, mi, QAction[name]] = n
        agent = cls(task, machine, cfg, table, QState(*doc["state"]),
                    doc["avg_t"]["runtime_sum_s"], doc["avg_t"]["runtime_count"], doc.get("episode", 0))
        return agent
