"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error,
3 trace or ledger parse/validation failure. Log verbosity comes from the
``WFSIZING_LOG_LEVEL`` environment variable (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
from collections import Counter, defaultdict
from dataclasses import replace
from pathlib import Path

from . import __version__, _kernels
from .config import ConfigError, bundled_config_path, config_summary, load_config, override
from .core import MachineSpec, SizingError, TaskProfile, ValidationError
from .experiment import (
    ExperimentConfig,
    StrategyId,
    aggregate,
    emit_report,
    read_ledger,
    run_experiment,
)
from .simulator import (
    ParseError,
    StageSpec,
    WorkflowSpec,
    WorkloadSpec,
    fit_behavior,
    load_traces,
    modal_alloc,
    read_trace_rows,
)

log = logging.getLogger("wfsizing")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARSE = 0, 1, 2, 3


class UsageError(SizingError):
    pass


class InputError(SizingError):
    """A trace or ledger file failed to parse or validate."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for runtime errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _strategy_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    valid = {s.value for s in StrategyId}
    bad = [s for s in names if s not in valid]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown strategies {bad}; choose from {sorted(valid)}")
    return names


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wfsizing", description="Workflow task sizing with gradient bandits and Q-learning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp, config_default):
        sp.add_argument("--config", type=Path, default=config_default,
                        help="YAML experiment config (default: the bundled five-workflow setup)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
        sp.add_argument("--strategies", type=_strategy_list, help="comma-separated subset, e.g. default,bandits")
        sp.add_argument("--episodes", type=_positive, help="episodes per strategy (training excluded)")

    sim = sub.add_parser("simulate", help="run strategies on the synthetic workload")
    run_flags(sim, None)

    rep = sub.add_parser("replay", help="fit behaviors from a trace CSV and run strategies against them")
    rep.add_argument("trace", type=Path)
    run_flags(rep, None)

    rpt = sub.add_parser("report", help="recompute the aggregate from ledger CSVs")
    rpt.add_argument("ledgers", type=Path, nargs="*")
    rpt.add_argument("--out", type=Path, default=Path("out"))
    rpt.add_argument("--window", type=_positive, default=10, help="final episodes compared (default 10)")

    val = sub.add_parser("validate-config", help="check a config without running it")
    val.add_argument("--config", type=Path, default=None)
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config or bundled_config_path())
    return override(cfg, args.seed, args.strategies, args.episodes)


def _provenance(cfg: ExperimentConfig, **extra) -> dict:
    return {"package_version": __version__, "config": config_summary(cfg), **extra}


def _print_summary(report, written) -> None:
    print(f"{'strategy':<10} {'cpu_wastage_h':>14} {'mem_wastage_gbh':>16} {'failures':>9}")
    for s, sr in sorted(report.strategies.items(), key=lambda kv: kv[0].value):
        m = sr.overall
        print(f"{s.value:<10} {m.cpu_wastage_hours:>14.2f} {m.mem_wastage_gbh:>16.2f} {m.failure_count:>9d}")
    print(f"wrote {len(written)} files to {written[0].parent}")


def cmd_simulate(args) -> int:
    cfg = _load(args)
    result = run_experiment(cfg, provenance=_provenance(cfg, mode="simulate"))
    written = emit_report(result.report, result.ledgers, args.out, result.snapshots)
    _print_summary(result.report, written)
    return EXIT_OK


# -- replay -------------------------------------------------------------------


def _infer_machines(records, known: dict) -> dict:
    caps = defaultdict(lambda: [0, 0])
    for r in records:
        c = caps[r.machine_name]
        c[0] = max(c[0], r.alloc.cpus)
        c[1] = max(c[1], r.alloc.mem_bytes)
    out = {}
    for name, (cores, mem) in caps.items():
        if name in known:
            out[name] = known[name]
        else:
            log.info("machine %s not in config; capacity inferred from the largest allocation", name)
            out[name] = MachineSpec(name, cores, mem)
    return out


def _episode_groups(path) -> int | None:
    """Distinct (strategy, episode) pairs when the file is a ledger, else ``None``."""
    seen = set()
    for _, raw in read_trace_rows(path):
        if not raw.get("episode"):
            return None
        seen.add((raw.get("strategy", ""), raw["episode"]))
    return len(seen) or None


def replay_workload(records, base: ExperimentConfig | None, seed: int,
                    n_groups: int | None = None) -> tuple[WorkloadSpec, dict]:
    """Build a workload whose tasks, machines and behaviors all come from ``records``.

    Returns the workload and the per-task fits behind it.

    Tasks the base config knows keep their configured default allocation and
    reference input size; unknown tasks use their most frequent allocation.
    """
    if not records:
        raise ValidationError("trace holds no rows")
    known_tasks, known_refs, known_machines = {}, {}, {}
    if base is not None:
        spec = base.workload
        known_machines = {m.name: m for m in spec.machines}
        for wf in spec.workflows:
            for st in wf.stages:
                key = (wf.name, st.task.task_name)
                known_tasks[key] = st
                known_refs[key] = spec.behaviors[st.task.behavior_ref].reference_input_bytes
    machines = _infer_machines(records, known_machines)
    fits = fit_behavior(records, known_refs)

    by_task = defaultdict(list)
    for r in records:
        by_task[(r.workflow, r.task_name)].append(r)
    workflows = defaultdict(list)
    behaviors = {}
    for key, recs in by_task.items():
        wf, task = key
        ok = [r for r in recs if r.outcome.ok]
        sizes = [r.input_size_bytes for r in (ok or recs)]
        mean = statistics.fmean(sizes)
        cv = statistics.stdev(sizes) / mean if len(sizes) > 1 and mean > 0 else 0.0
        count = len(ok) if n_groups is None else max(1, round(len(ok) / n_groups))
        machine = machines[max(Counter(r.machine_name for r in recs).items(), key=lambda kv: (kv[1], kv[0]))[0]]
        default = known_tasks[key].task.default_alloc if key in known_tasks else modal_alloc(recs)
        if not default.fits(machine):
            default = replace(default, cpus=min(default.cpus, machine.total_cores),
                              mem_bytes=min(default.mem_bytes, machine.total_mem_bytes))
        ref = f"{wf}/{task}"
        behaviors[ref] = fits[key].behavior
        workflows[wf].append(StageSpec(TaskProfile(wf, task, default, ref), count,
                                       max(1, int(round(mean))), cv, machine.name))
    spec = WorkloadSpec(tuple(WorkflowSpec(name, tuple(st)) for name, st in workflows.items()),
                        tuple(machines.values()), behaviors, seed=seed)
    return spec, fits


def cmd_replay(args) -> int:
    base = _load(args) if args.config else None
    seed = args.seed if args.seed is not None else (base.seed if base else 0)
    try:
        records = load_traces(args.trace)
        workload, fits = replay_workload(records, base, seed, _episode_groups(args.trace))
    except (ParseError, ValidationError) as e:
        raise InputError(str(e)) from e
    for (wf, task), fit in sorted(fits.items()):
        if fit.insufficient_data:
            print(f"warning: {wf}/{task}: too little data to fit, degenerate behavior used", file=sys.stderr)
    cfg = replace(base, workload=workload) if base else ExperimentConfig(workload)
    cfg = override(cfg, None, args.strategies, args.episodes)
    result = run_experiment(cfg, provenance=_provenance(cfg, mode="replay", trace=Path(args.trace).name))
    written = emit_report(result.report, result.ledgers, args.out, result.snapshots)
    _print_summary(result.report, written)
    return EXIT_OK


# -- report -------------------------------------------------------------------


def cmd_report(args) -> int:
    if not args.ledgers:
        raise UsageError("report needs at least one ledger file")
    ledgers = {}
    for i, path in enumerate(args.ledgers):
        try:
            rows = read_ledger(path)
        except (ParseError, ValidationError, ValueError) as e:
            raise InputError(f"{path}: {e}") from e
        for r in rows:
            ledgers.setdefault(r.strategy, {}).setdefault(i, []).append(r)
    merged = {}
    for s, per_file in ledgers.items():
        if len(per_file) > 1:
            raise UsageError(f"strategy {s.value!r} appears in more than one ledger")
        merged[s] = next(iter(per_file.values()))
    if not merged:
        raise UsageError("ledgers hold no rows")
    report = aggregate(merged, args.window, {"mode": "report", "package_version": __version__,
                                             "ledgers": [Path(p).name for p in args.ledgers],
                                             "window": args.window})
    written = emit_report(report, {}, args.out)
    _print_summary(report, written)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config or bundled_config_path())
    spec = cfg.workload
    n_tasks = sum(len(wf.stages) for wf in spec.workflows)
    print(f"ok: {len(spec.workflows)} workflows, {n_tasks} tasks, {len(spec.machines)} machines, seed {spec.seed}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "replay": cmd_replay, "report": cmd_report, "validate-config": cmd_validate}


def main(argv=None) -> int:
    level = os.environ.get("WFSIZING_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    log.debug("kernel backend: %s", _kernels.BACKEND)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except FileNotFoundError as e:
        print(f"error: {e.filename}: no such file", file=sys.stderr)
        return EXIT_USAGE
    except (SizingError, OSError, ArithmeticError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
