"""Task execution environment: speedup model, workload expansion, trace I/O.

A task's work at its reference input size takes ``serial_runtime_s`` on one
core and scales linearly with input size. A fraction ``parallel_fraction``
of it spreads over ``min(cpus, max_parallelism)`` cores; ``parallel_overhead``
inflates the parallel work by that much per extra core, so both runtime and
busy core-time flatten out as cores are added. Memory demand is affine in
the input size. An allocation below the demand is an OOM kill.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .core import (
    ExecutionOutcome,
    MachineSpec,
    ResourceAlloc,
    SizingError,
    Status,
    TaskProfile,
    TraceRecord,
    ValidationError,
)

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "workflow", "task", "machine", "input_size_bytes", "cpus_alloc", "cpu_usage_pct",
    "mem_alloc_bytes", "peak_rss_bytes", "runtime_s", "status",
)


class ParseError(SizingError, ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class TraceValidationError(ValidationError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


# -- RNG ----------------------------------------------------------------------


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``; keys may be ints or strings."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(_key_int, keys)])))


# -- behavior model -----------------------------------------------------------


@dataclass(frozen=True)
class TaskBehavior:
    serial_runtime_s: float
    parallel_fraction: float
    max_parallelism: float
    peak_mem_base_bytes: int
    reference_input_bytes: int = 10**9
    mem_per_input_byte: float = 0.0
    parallel_overhead: float = 0.0
    runtime_noise_cv: float = 0.0
    mem_noise_cv: float = 0.0

    def __post_init__(self):
        vals = (self.serial_runtime_s, self.parallel_fraction, self.max_parallelism, self.peak_mem_base_bytes,
                self.mem_per_input_byte, self.parallel_overhead, self.runtime_noise_cv, self.mem_noise_cv)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("behavior fields must be finite")
        if self.serial_runtime_s <= 0 or self.max_parallelism <= 0 or self.peak_mem_base_bytes <= 0:
            raise ValidationError("runtime, parallelism and base memory must be positive")
        if not 0 <= self.parallel_fraction <= 1:
            raise ValidationError("parallel_fraction must lie in [0, 1]")
        if self.reference_input_bytes <= 0:
            raise ValidationError("reference_input_bytes must be positive")
        if min(self.mem_per_input_byte, self.parallel_overhead, self.runtime_noise_cv, self.mem_noise_cv) < 0:
            raise ValidationError("slopes, overhead and noise must be non-negative")

    def base_runtime(self, input_size: int) -> float:
        return self.serial_runtime_s * input_size / self.reference_input_bytes

    def peak_mem(self, input_size: int) -> float:
        return self.peak_mem_base_bytes + self.mem_per_input_byte * input_size


def speedup(base: float, f: float, max_par: float, overhead: float, cpus: float) -> tuple[float, float]:
    """``(runtime, busy core-seconds)`` for ``base`` seconds of single-core work."""
    p = min(float(cpus), max_par)
    par_work = base * f * (1.0 + overhead * (p - 1.0))
    return base * (1.0 - f) + par_work / p, base * (1.0 - f) + par_work


def runtime_curve(behavior: TaskBehavior, input_size: int, cpus) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free runtime and busy time for an array of core counts."""
    return _kernels.speedup_curve(behavior.base_runtime(input_size), behavior.parallel_fraction,
                                  float(behavior.max_parallelism), behavior.parallel_overhead,
                                  np.asarray(cpus, dtype=np.int64))


def _lognormal_factor(z: float, cv: float) -> float:
    if cv == 0:
        return 1.0
    s2 = math.log1p(cv * cv)
    return math.exp(math.sqrt(s2) * z - s2 / 2)


def execute(behavior: TaskBehavior, input_size: int, alloc: ResourceAlloc, rng: np.random.Generator,
            oom_fraction: float = 0.5) -> ExecutionOutcome:
    # two normals are always drawn so stream layout doesn't depend on the noise settings
    z_time, z_mem = rng.standard_normal(2)
    base = behavior.base_runtime(input_size)
    if base <= 0:
        raise ValueError("input size must be positive")
    t, busy = speedup(base, behavior.parallel_fraction, behavior.max_parallelism,
                      behavior.parallel_overhead, alloc.cpus)
    noise = _lognormal_factor(z_time, behavior.runtime_noise_cv)
    t *= noise
    busy *= noise
    usage = 100.0 * busy / t
    peak = int(round(behavior.peak_mem(input_size) * _lognormal_factor(z_mem, behavior.mem_noise_cv)))
    if peak > alloc.mem_bytes:
        return ExecutionOutcome(t * oom_fraction, usage, alloc.mem_bytes, Status.OOM)
    return ExecutionOutcome(t, usage, peak, Status.SUCCESS)


# -- workload -----------------------------------------------------------------


@dataclass(frozen=True)
class StageSpec:
    task: TaskProfile
    instance_count: int
    input_mean_bytes: int
    input_cv: float = 0.0
    machine: str | None = None

    def __post_init__(self):
        if self.instance_count < 1:
            raise ValidationError(f"stage {self.task.task_name!r}: instance_count must be >= 1")
        if self.input_mean_bytes <= 0 or self.input_cv < 0:
            raise ValidationError(f"stage {self.task.task_name!r}: bad input size distribution")


@dataclass(frozen=True)
class WorkflowSpec:
    name: str
    stages: tuple[StageSpec, ...]


@dataclass(frozen=True)
class WorkloadSpec:
    workflows: tuple[WorkflowSpec, ...]
    machines: tuple[MachineSpec, ...]
    behaviors: dict = field(hash=False)
    episodes: int = 1
    seed: int = 0

    def machine(self, name: str) -> MachineSpec:
        for m in self.machines:
            if m.name == name:
                return m
        raise KeyError(name)

    def tasks(self) -> list[TaskProfile]:
        return [st.task for wf in self.workflows for st in wf.stages]


@dataclass(frozen=True)
class TaskInstance:
    workflow: str
    task: TaskProfile
    machine: MachineSpec
    input_size_bytes: int
    stage: int
    index: int


def gen_workload(spec: WorkloadSpec, episode: int = 0) -> list[TaskInstance]:
    """Expand stages into task instances with sampled input sizes, in submission order."""
    rng = substream(spec.seed, "workload", episode)
    out = []
    idx = 0
    for wf in spec.workflows:
        for si, st in enumerate(wf.stages):
            if st.machine is not None:
                candidates = [spec.machine(st.machine)]
            else:
                candidates = [m for m in spec.machines if st.task.default_alloc.fits(m)]
            if not candidates:
                raise ValidationError(f"no machine fits the default of task {st.task.task_name!r}")
            for _ in range(st.instance_count):
                m = candidates[int(rng.integers(len(candidates)))] if len(candidates) > 1 else candidates[0]
                z = rng.standard_normal()
                size = max(1, int(round(st.input_mean_bytes * _lognormal_factor(z, st.input_cv))))
                out.append(TaskInstance(wf.name, st.task, m, size, si, idx))
                idx += 1
    return out


@dataclass
class SimulatedEnvironment:
    behaviors: dict
    oom_fraction: float = 0.5

    def execute(self, inst: TaskInstance, alloc: ResourceAlloc, rng: np.random.Generator) -> ExecutionOutcome:
        return execute(self.behaviors[inst.task.behavior_ref], inst.input_size_bytes, alloc, rng, self.oom_fraction)


# -- trace CSV ----------------------------------------------------------------


def format_float(x: float) -> str:
    return repr(float(x))


def trace_row(rec: TraceRecord) -> list[str]:
    o = rec.outcome
    return [rec.workflow, rec.task_name, rec.machine_name, str(rec.input_size_bytes), str(rec.alloc.cpus),
            format_float(o.cpu_usage_pct), str(rec.alloc.mem_bytes), str(o.peak_rss_bytes),
            format_float(o.runtime_s), o.status.value]


def write_traces(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in records:
            w.writerow(trace_row(rec))


def _parse(value: str, kind, row: int, column: str):
    try:
        if kind is int:
            return int(value)
        x = float(value)
        if not math.isfinite(x):
            raise ValueError
        return x
    except (TypeError, ValueError):
        raise ParseError(f"cannot parse {value!r} as {kind.__name__}", row, column) from None


def parse_trace_row(r: dict, row: int) -> TraceRecord:
    """Parse one CSV row (as a dict) into a validated record. ``row`` is the file line number."""
    for col in TRACE_COLUMNS:
        if r.get(col) in (None, "") and col not in ("workflow",):
            raise ParseError("missing value", row, col)
    status_txt = r["status"].strip().lower()
    if status_txt not in ("success", "oom"):
        raise ParseError(f"status must be 'success' or 'oom', got {r['status']!r}", row, "status")
    status = Status(status_txt)
    cpus = _parse(r["cpus_alloc"], int, row, "cpus_alloc")
    mem = _parse(r["mem_alloc_bytes"], int, row, "mem_alloc_bytes")
    usage = _parse(r["cpu_usage_pct"], float, row, "cpu_usage_pct")
    peak = _parse(r["peak_rss_bytes"], int, row, "peak_rss_bytes")
    runtime = _parse(r["runtime_s"], float, row, "runtime_s")
    size = _parse(r["input_size_bytes"], int, row, "input_size_bytes")
    if cpus < 1 or mem < 1:
        raise TraceValidationError("allocations must be positive", row)
    if runtime < 0 or usage < 0 or peak < 0 or size < 0:
        raise TraceValidationError("negative measurement", row)
    if status is Status.SUCCESS:
        if runtime <= 0:
            raise TraceValidationError("successful attempt with zero runtime", row)
        if peak > mem:
            raise TraceValidationError(f"peak_rss_bytes {peak} exceeds mem_alloc_bytes {mem} on a success", row)
    elif peak < mem:
        raise TraceValidationError("OOM row with peak_rss_bytes below the allocation", row)
    # relative slack absorbs float rounding of busy/runtime at full utilization
    if usage > 100.0 * cpus * (1 + 1e-9):
        log.warning("row %d: cpu usage %.1f%% exceeds the %d allocated cores; kept as measured", row, usage, cpus)
    return TraceRecord(r["workflow"], r["task"], r["machine"], size, ResourceAlloc(cpus, mem),
                       ExecutionOutcome(runtime, usage, peak, status))


def read_trace_rows(path):
    """Yield ``(line_number, row_dict)`` after checking the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty file, header required", 1)
        missing = [c for c in TRACE_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"header lacks {', '.join(missing)}", 1)
        for r in reader:
            if None in r:
                raise ParseError("too many fields", reader.line_num)
            yield reader.line_num, r


def load_traces(path) -> list[TraceRecord]:
    path = Path(path)
    return [parse_trace_row(r, line) for line, r in read_trace_rows(path)]


# -- behavior fitting ---------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    behavior: TaskBehavior
    n_records: int
    runtime_residual_rel: float
    insufficient_data: bool
    max_parallelism_censored: bool = False


def _linfit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns ``(a, b, sum of squared residuals)``."""
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return float(coef[0]), float(coef[1]), float(res @ res)


def _fit_one(recs: list[TraceRecord], reference: int | None) -> FitResult:
    ok = [r for r in recs if r.outcome.ok]
    insufficient = False
    if reference is None:
        sizes = [r.input_size_bytes for r in (ok or recs)]
        reference = max(1, int(round(sum(sizes) / len(sizes))))

    # memory: peak = base + slope * input
    if ok:
        xs = np.array([r.input_size_bytes for r in ok], dtype=np.float64)
        ps = np.array([r.outcome.peak_rss_bytes for r in ok], dtype=np.float64)
        if len(set(xs.tolist())) >= 2:
            mem_base, slope, _ = _linfit(xs, ps)
            if slope < 0:
                mem_base, slope = float(ps.mean()), 0.0
        else:
            mem_base, slope = float(ps.mean()), 0.0
    else:
        insufficient = True
        mem_base, slope = float(max(r.alloc.mem_bytes for r in recs)) * 2, 0.0
    mem_base = max(1, int(round(mem_base)))

    if not ok:
        t0 = max(r.outcome.runtime_s for r in recs) or 1.0
        beh = TaskBehavior(t0, 0.0, 1.0, mem_base, reference, slope)
        return FitResult(beh, len(recs), math.inf, True)

    sizes = np.array([r.input_size_bytes for r in ok], dtype=np.float64)
    cpus = np.array([r.alloc.cpus for r in ok], dtype=np.float64)
    t = np.array([r.outcome.runtime_s for r in ok])
    busy = np.array([r.outcome.cpu_usage_pct / 100.0 * r.outcome.runtime_s for r in ok])
    y = t / sizes
    z = busy / sizes

    best = None
    censored = False
    distinct = sorted(set(cpus.tolist()))
    if len(distinct) >= 2:
        scale = float(np.mean(y)) ** 2 + float(np.mean(z)) ** 2
        fits = []
        for m in distinct:
            p = np.minimum(cpus, m)
            if len(set(p.tolist())) < 2:
                continue
            a0, a1, rz = _linfit(p, z)
            b0, b1, ry = _linfit(1.0 / p, y)
            fits.append((rz + ry, m, a0, a1, b1))
        if fits:
            floor = min(f[0] for f in fits)
            tol = floor * (1 + 1e-6) + 1e-24 * scale * len(ok)
            best = next(f for f in fits if f[0] <= tol)
            censored = best[1] == distinct[-1]

    if best is None:
        insufficient = True
        rate = float(np.mean(y))
        beh = TaskBehavior(rate * reference, 0.0, 1.0, mem_base, reference, slope)
    else:
        _, m, a0, a1, b1 = best
        rate = a0 + a1
        f = min(1.0, max(0.0, (a1 + b1) / rate))
        overhead = max(0.0, a1 / (rate * f)) if f > 0 else 0.0
        beh = TaskBehavior(rate * reference, f, float(m), mem_base, reference, slope, overhead)

    pred = np.array([speedup(beh.base_runtime(r.input_size_bytes), beh.parallel_fraction, beh.max_parallelism,
                             beh.parallel_overhead, r.alloc.cpus)[0] for r in ok])
    resid = float(np.max(np.abs(pred - t) / t))
    return FitResult(beh, len(recs), resid, insufficient or len(ok) < 2, censored)


def fit_behavior(records, reference_input_bytes: dict | None = None) -> dict[tuple[str, str], FitResult]:
    """Calibrate one behavior per (workflow, task) from trace records.

    ``reference_input_bytes`` optionally pins the reference size per key;
    otherwise the mean observed input size is used.
    """
    groups = defaultdict(list)
    for r in records:
        groups[(r.workflow, r.task_name)].append(r)
    out = {}
    for key, recs in groups.items():
        ref = (reference_input_bytes or {}).get(key)
        out[key] = _fit_one(recs, ref)
        if out[key].insufficient_data:
            log.info("task %s/%s: insufficient data, degenerate behavior used", *key)
    return out


def modal_alloc(records) -> ResourceAlloc:
    """Most frequent allocation; ties go to the larger one."""
    counts = Counter((r.alloc.cpus, r.alloc.mem_bytes) for r in records)
    (cpus, mem), _ = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
    return ResourceAlloc(cpus, mem)
