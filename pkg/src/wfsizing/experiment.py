"""Run sizing strategies over workflow episodes and account for wastage.

Every (strategy, task, machine) triple owns one agent, created on first use
and kept across episodes. Within an episode each task instance is sized by
its agent, executed, fed back, and retried after an OOM kill until it
succeeds or the strategy has nothing larger to offer. Every attempt lands
in the ledger; the aggregate compares allocated against used core-hours and
GB-hours over each strategy's final episodes.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .bandit import DEFAULT_CPU_CAP_FACTOR, BanditAgent
from .baselines import DefaultAgent, FeedbackLoopAgent
from .core import AgentKey, ExecutionOutcome, ResourceAlloc, SizingError, Status, TraceRecord, cpu_hours, mem_gbh
from .qlearn import QAgent, QConfig, level_config
from .simulator import (
    TRACE_COLUMNS,
    ParseError,
    SimulatedEnvironment,
    TaskInstance,
    WorkloadSpec,
    format_float,
    gen_workload,
    parse_trace_row,
    read_trace_rows,
    substream,
    trace_row,
)

log = logging.getLogger(__name__)

REPORT_VERSION = 1
LEDGER_COLUMNS = TRACE_COLUMNS + ("strategy", "episode", "instance", "attempt", "reward", "cpu_reward")


class EmptyGroup(SizingError):
    pass


class StrategyId(str, enum.Enum):
    DEFAULT = "default"
    FEEDBACK = "feedback"
    BANDITS = "bandits"
    QLEARNING = "qlearning"


# fixed stream tags; never reorder
_STRATEGY_TAG = {StrategyId.DEFAULT: 1, StrategyId.FEEDBACK: 2, StrategyId.BANDITS: 3, StrategyId.QLEARNING: 4}


@dataclass(frozen=True)
class AttemptLedgerRow:
    episode: int
    workflow: str
    task: str
    machine: str
    instance: int
    attempt_no: int
    input_size_bytes: int
    alloc: ResourceAlloc
    outcome: ExecutionOutcome
    strategy: StrategyId
    reward: float | None = None
    cpu_reward: float | None = None

    def to_trace(self) -> TraceRecord:
        return TraceRecord(self.workflow, self.task, self.machine, self.input_size_bytes, self.alloc, self.outcome)


@dataclass(frozen=True)
class ExperimentConfig:
    workload: WorkloadSpec
    strategies: tuple[StrategyId, ...] = tuple(StrategyId)
    episodes: dict = field(default_factory=lambda: {
        StrategyId.DEFAULT: 10, StrategyId.FEEDBACK: 10, StrategyId.BANDITS: 50, StrategyId.QLEARNING: 100})
    feedback_training: int = 10
    feedback_use_std: bool = True
    window: int = 10
    oom_fraction: float = 0.5
    max_attempts: int = 8
    n_chunks: int = 10
    cpu_cap_factor: float = DEFAULT_CPU_CAP_FACTOR
    initial_action: int | None = None
    qlearning: QConfig = QConfig()
    epsilon_decay_fraction: float = 0.7

    @property
    def seed(self) -> int:
        return self.workload.seed

    def total_episodes(self, strategy: StrategyId) -> int:
        n = self.episodes[strategy]
        return n + self.feedback_training if strategy is StrategyId.FEEDBACK else n

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, workload=replace(self.workload, seed=seed))


class AgentRegistry:
    """One agent per (strategy, task, machine), created lazily."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.agents: dict[tuple[StrategyId, AgentKey], object] = {}

    @staticmethod
    def key(inst: TaskInstance) -> AgentKey:
        return AgentKey(f"{inst.workflow}/{inst.task.task_name}", inst.machine.name)

    def get(self, strategy: StrategyId, inst: TaskInstance):
        k = (strategy, self.key(inst))
        agent = self.agents.get(k)
        if agent is None:
            agent = self._create(strategy, inst)
            self.agents[k] = agent
        return agent

    def _create(self, strategy: StrategyId, inst: TaskInstance):
        cfg = self.config
        task, machine = inst.task, inst.machine
        if strategy is StrategyId.DEFAULT:
            return DefaultAgent(task, machine)
        if strategy is StrategyId.FEEDBACK:
            return FeedbackLoopAgent(task, machine, cfg.feedback_training, cfg.feedback_use_std)
        if strategy is StrategyId.BANDITS:
            return BanditAgent.create(task, machine, cfg.n_chunks, cfg.cpu_cap_factor, cfg.initial_action)
        decay = int(round(cfg.epsilon_decay_fraction * cfg.episodes[StrategyId.QLEARNING]))
        base = replace(cfg.qlearning, epsilon_decay_episodes=decay)
        return QAgent.create(task, machine, level_config(task, machine, base, cfg.n_chunks, cfg.cpu_cap_factor))

    def snapshots(self, strategy: StrategyId) -> dict:
        return {str(k): a.to_snapshot() for (s, k), a in sorted(self.agents.items(), key=lambda kv: str(kv[0][1]))
                if s is strategy}


def run_episode(strategy: StrategyId, instances, env, registry: AgentRegistry, seed: int, episode: int,
                max_attempts: int = 8) -> list[AttemptLedgerRow]:
    strategy = StrategyId(strategy)
    agent_rng = substream(seed, "agent", _STRATEGY_TAG[strategy], episode)
    rows = []
    started = set()
    for inst in instances:
        agent = registry.get(strategy, inst)
        if id(agent) not in started:
            started.add(id(agent))
            if hasattr(agent, "begin_episode"):
                agent.begin_episode(episode)
        alloc = agent.propose(agent_rng)
        attempt = 1
        while True:
            # environment noise depends only on (episode, instance, attempt): common across strategies
            outcome = env.execute(inst, alloc, substream(seed, "env", episode, inst.index, attempt))
            reward = agent.observe(alloc, outcome, attempt)
            r_mem, r_cpu = reward if isinstance(reward, tuple) else (reward, None)
            rows.append(AttemptLedgerRow(episode, inst.workflow, inst.task.task_name, inst.machine.name,
                                         inst.index, attempt, inst.input_size_bytes, alloc, outcome, strategy,
                                         r_mem, r_cpu))
            if outcome.ok or attempt >= max_attempts:
                break
            nxt = agent.retry(alloc, agent_rng)
            if nxt is None:
                log.warning("%s: %s gave up on instance %d of episode %d", strategy.value,
                            registry.key(inst), inst.index, episode)
                break
            alloc = nxt
            attempt += 1
    return rows


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    allocated_cpu_hours: float
    used_cpu_hours: float
    cpu_wastage_hours: float
    allocated_mem_gbh: float
    used_mem_gbh: float
    mem_wastage_gbh: float
    failure_count: int
    attempt_count: int
    episode_count: int

    def to_dict(self) -> dict:
        return asdict(self)


def wastage_metrics(rows) -> Metrics:
    """Allocated vs used resource-time over ``rows``. Sums are exact (``math.fsum``)."""
    rows = list(rows)
    if not rows:
        raise EmptyGroup("no ledger rows in group")
    alloc_cpu = math.fsum(cpu_hours(r.alloc.cpus, r.outcome.runtime_s) for r in rows)
    used_cpu = math.fsum(cpu_hours(r.outcome.used_cores, r.outcome.runtime_s) for r in rows)
    alloc_mem = math.fsum(mem_gbh(r.alloc.mem_bytes, r.outcome.runtime_s) for r in rows)
    used_mem = math.fsum(mem_gbh(r.outcome.peak_rss_bytes, r.outcome.runtime_s) for r in rows)
    return Metrics(
        allocated_cpu_hours=alloc_cpu,
        used_cpu_hours=used_cpu,
        cpu_wastage_hours=alloc_cpu - used_cpu,
        allocated_mem_gbh=alloc_mem,
        used_mem_gbh=used_mem,
        mem_wastage_gbh=alloc_mem - used_mem,
        failure_count=sum(1 for r in rows if r.outcome.status is Status.OOM),
        attempt_count=len(rows),
        episode_count=len({r.episode for r in rows}),
    )


@dataclass(frozen=True)
class StrategyReport:
    episodes_run: int
    window: tuple[int, int]
    overall: Metrics
    workflows: dict

    def to_dict(self) -> dict:
        return {
            "episodes_run": self.episodes_run,
            "window": list(self.window),
            "overall": self.overall.to_dict(),
            "workflows": {wf: m.to_dict() for wf, m in sorted(self.workflows.items())},
        }


@dataclass
class AggregateReport:
    strategies: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_VERSION,
            "provenance": self.provenance,
            "strategies": {s.value: r.to_dict() for s, r in sorted(self.strategies.items(), key=lambda kv: kv[0].value)},
        }


def summarize(rows, window: int) -> StrategyReport:
    """Metrics over the final ``window`` episodes found in ``rows``."""
    rows = list(rows)
    if not rows:
        raise EmptyGroup("no ledger rows")
    episodes = sorted({r.episode for r in rows})
    keep = set(episodes[-window:])
    sel = [r for r in rows if r.episode in keep]
    by_wf = defaultdict(list)
    for r in sel:
        by_wf[r.workflow].append(r)
    return StrategyReport(len(episodes), (min(keep), max(keep)), wastage_metrics(sel),
                          {wf: wastage_metrics(rs) for wf, rs in by_wf.items()})


def aggregate(ledgers: dict, window: int, provenance: dict | None = None) -> AggregateReport:
    return AggregateReport({StrategyId(s): summarize(rows, window) for s, rows in ledgers.items()},
                           provenance or {})


# -- experiment ---------------------------------------------------------------


@dataclass
class ExperimentResult:
    report: AggregateReport
    ledgers: dict
    snapshots: dict


def run_experiment(config: ExperimentConfig, env=None, provenance: dict | None = None) -> ExperimentResult:
    spec = config.workload
    env = env or SimulatedEnvironment(spec.behaviors, config.oom_fraction)
    registry = AgentRegistry(config)
    ledgers, snapshots = {}, {}
    workloads = {}
    for strategy in config.strategies:
        rows = []
        for ep in range(config.total_episodes(strategy)):
            if ep not in workloads:
                workloads[ep] = gen_workload(spec, ep)
            rows.extend(run_episode(strategy, workloads[ep], env, registry, spec.seed, ep, config.max_attempts))
        log.info("%s: %d episodes, %d attempts", strategy.value, config.total_episodes(strategy), len(rows))
        ledgers[strategy] = rows
        snapshots[strategy] = registry.snapshots(strategy)
    report = aggregate(ledgers, config.window, provenance)
    return ExperimentResult(report, ledgers, snapshots)


# -- files --------------------------------------------------------------------


def _opt(x) -> str:
    return "" if x is None else format_float(x)


def write_ledger(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for r in rows:
            w.writerow(trace_row(r.to_trace()) + [r.strategy.value, str(r.episode), str(r.instance),
                                                  str(r.attempt_no), _opt(r.reward), _opt(r.cpu_reward)])


def read_ledger(path) -> list[AttemptLedgerRow]:
    rows = []
    for line, raw in read_trace_rows(path):
        rec = parse_trace_row(raw, line)
        missing = [c for c in ("strategy", "episode", "attempt") if raw.get(c) in (None, "")]
        if missing:
            raise ParseError(f"ledger row lacks {', '.join(missing)}", line)
        rows.append(AttemptLedgerRow(
            int(raw["episode"]), rec.workflow, rec.task_name, rec.machine_name,
            int(raw.get("instance") or 0), int(raw["attempt"]), rec.input_size_bytes, rec.alloc, rec.outcome,
            StrategyId(raw["strategy"]),
            float(raw["reward"]) if raw.get("reward") else None,
            float(raw["cpu_reward"]) if raw.get("cpu_reward") else None,
        ))
    return rows


def comparison_rows(report: AggregateReport) -> list[list[str]]:
    """Header plus one row per (strategy, workflow); overall totals live in the JSON."""
    names = [f.name for f in fields(Metrics)]
    out = [["strategy", "workflow", *names]]
    for s, sr in sorted(report.strategies.items(), key=lambda kv: kv[0].value):
        for wf, m in sorted(sr.workflows.items()):
            d = m.to_dict()
            out.append([s.value, wf, *(format_float(d[n]) if isinstance(d[n], float) else str(d[n]) for n in names)])
    return out


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def emit_report(report: AggregateReport, ledgers: dict, out_dir, snapshots: dict | None = None) -> list[Path]:
    """Write ``aggregate.json``, ``comparison.csv`` and one ``ledger_<strategy>.csv`` per strategy."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "aggregate.json", out / "comparison.csv"]
    write_json(written[0], report.to_dict())
    with open(written[1], "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(comparison_rows(report))
    for s, rows in ledgers.items():
        p = out / f"ledger_{StrategyId(s).value}.csv"
        write_ledger(p, rows)
        written.append(p)
    for s, snap in (snapshots or {}).items():
        p = out / f"agents_{StrategyId(s).value}.json"
        write_json(p, {"schema_version": REPORT_VERSION, "agents": snap})
        written.append(p)
    return written
