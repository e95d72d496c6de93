"""YAML experiment configuration.

Every error names the line it came from. Memory sizes may be given in
decimal gigabytes (``*_gb``) or bytes (``*_bytes``). See
``data/five_workflows.yaml`` for a complete, commented example.
"""

from __future__ import annotations

from dataclasses import replace
from importlib import resources
from pathlib import Path

import yaml

from .bandit import DEFAULT_CPU_CAP_FACTOR
from .core import GB, MachineSpec, ResourceAlloc, SizingError, TaskProfile
from .experiment import ExperimentConfig, StrategyId
from .qlearn import QConfig
from .simulator import StageSpec, TaskBehavior, WorkflowSpec, WorkloadSpec


class ConfigError(SizingError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class _Map(dict):
    """dict that remembers the source line of itself and of each key."""

    line: int | None = None
    key_lines: dict


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    m = _Map()
    m.line = node.start_mark.line + 1
    m.key_lines = {}
    for k_node, v_node in node.value:
        k = loader.construct_object(k_node, deep=True)
        m[k] = loader.construct_object(v_node, deep=True)
        m.key_lines[k] = k_node.start_mark.line + 1
    return m


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


def _line(m, key=None):
    if isinstance(m, _Map):
        return m.key_lines.get(key, m.line) if key is not None else m.line
    return None


def _get(m, key, kind, default=..., lo=None, hi=None):
    if key not in m:
        if default is ...:
            raise ConfigError(f"missing required key {key!r}", _line(m))
        return default
    v = m[key]
    line = _line(m, key)
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is int and isinstance(v, float) and v.is_integer():
        v = int(v)
    if v is None and default is not ... and default is None:
        return None
    if not isinstance(v, kind) or (kind in (int, float) and isinstance(v, bool)):
        raise ConfigError(f"{key!r} must be {kind.__name__}, got {v!r}", line)
    if lo is not None and v < lo:
        raise ConfigError(f"{key!r} must be >= {lo}, got {v!r}", line)
    if hi is not None and v > hi:
        raise ConfigError(f"{key!r} must be <= {hi}, got {v!r}", line)
    return v


def _bytes(m, stem, default=...):
    if f"{stem}_bytes" in m:
        return _get(m, f"{stem}_bytes", int, lo=1)
    if f"{stem}_gb" in m:
        return int(round(_get(m, f"{stem}_gb", float, lo=0) * GB))
    if default is ...:
        raise ConfigError(f"missing {stem}_gb or {stem}_bytes", _line(m))
    return default


def _section(m, key):
    v = m.get(key, _Map())
    if not isinstance(v, dict):
        raise ConfigError(f"{key!r} must be a mapping", _line(m, key))
    return v


def _list(m, key):
    v = m.get(key)
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{key!r} must be a non-empty list", _line(m, key))
    return v


def _behavior(b, input_mean: int) -> TaskBehavior:
    try:
        return TaskBehavior(
            serial_runtime_s=_get(b, "serial_runtime_s", float, lo=0),
            parallel_fraction=_get(b, "parallel_fraction", float, lo=0, hi=1),
            max_parallelism=_get(b, "max_parallelism", float, lo=0),
            peak_mem_base_bytes=_bytes(b, "peak_mem_base"),
            reference_input_bytes=_bytes(b, "reference_input", input_mean),
            mem_per_input_byte=_get(b, "mem_per_input_byte", float, 0.0, lo=0),
            parallel_overhead=_get(b, "parallel_overhead", float, 0.0, lo=0),
            runtime_noise_cv=_get(b, "runtime_noise_cv", float, 0.0, lo=0),
            mem_noise_cv=_get(b, "mem_noise_cv", float, 0.0, lo=0),
        )
    except ConfigError:
        raise
    except SizingError as e:
        raise ConfigError(str(e), _line(b)) from None


def parse_config(doc) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping", 1)
    seed = _get(doc, "seed", int, 0)

    machines = []
    for m in _list(doc, "machines"):
        if not isinstance(m, dict):
            raise ConfigError("machine entries must be mappings", _line(doc, "machines"))
        machines.append(MachineSpec(_get(m, "name", str), _get(m, "cores", int, lo=1), _bytes(m, "mem")))
    names = {m.name for m in machines}

    behaviors, workflows, seen = {}, [], set()
    for wf in _list(doc, "workflows"):
        wf_name = _get(wf, "name", str)
        stages = []
        for st in _list(wf, "stages"):
            task_name = _get(st, "task", str)
            if (wf_name, task_name) in seen:
                raise ConfigError(f"task {task_name!r} appears twice in workflow {wf_name!r}", _line(st))
            seen.add((wf_name, task_name))
            input_mean = _bytes(st, "input")
            d = _section(st, "default")
            try:
                default = ResourceAlloc(_get(d, "cpus", int, lo=1), _bytes(d, "mem"))
            except ConfigError:
                raise
            except SizingError as e:
                raise ConfigError(str(e), _line(d)) from None
            ref = f"{wf_name}/{task_name}"
            behaviors[ref] = _behavior(_section(st, "behavior"), input_mean)
            machine = _get(st, "machine", str, None)
            if machine is not None and machine not in names:
                raise ConfigError(f"unknown machine {machine!r}", _line(st, "machine"))
            if not any(default.fits(m) for m in machines if machine in (None, m.name)):
                raise ConfigError(f"default allocation of {task_name!r} fits no machine", _line(st, "default"))
            try:
                stages.append(StageSpec(TaskProfile(wf_name, task_name, default, ref),
                                        _get(st, "instances", int, lo=1), input_mean,
                                        _get(st, "input_cv", float, 0.0, lo=0), machine))
            except ConfigError:
                raise
            except SizingError as e:
                raise ConfigError(str(e), _line(st)) from None
        workflows.append(WorkflowSpec(wf_name, tuple(stages)))

    strategies = doc.get("strategies", [s.value for s in StrategyId])
    try:
        strategies = tuple(StrategyId(s) for s in strategies)
    except (ValueError, TypeError):
        raise ConfigError(f"strategies must be drawn from {[s.value for s in StrategyId]}",
                          _line(doc, "strategies")) from None

    ep = _section(doc, "episodes")
    episodes = {
        StrategyId.DEFAULT: _get(ep, "default", int, 10, lo=1),
        StrategyId.FEEDBACK: _get(ep, "feedback", int, 10, lo=1),
        StrategyId.BANDITS: _get(ep, "bandits", int, 50, lo=1),
        StrategyId.QLEARNING: _get(ep, "qlearning", int, 100, lo=1),
    }
    b = _section(doc, "bandit")
    q = _section(doc, "qlearning")
    fb = _section(doc, "feedback")
    try:
        qcfg = QConfig(
            learning_rate=_get(q, "learning_rate", float, 0.1),
            discount=_get(q, "discount", float, 0.5),
            epsilon_start=_get(q, "epsilon_start", float, 1.0),
            epsilon_end=_get(q, "epsilon_end", float, 0.05),
        )
    except ConfigError:
        raise
    except SizingError as e:
        raise ConfigError(str(e), _line(q)) from None
    n_chunks = _get(b, "n_chunks", int, 10, lo=2)
    initial = _get(b, "initial_action", int, None, lo=1, hi=n_chunks)

    workload = WorkloadSpec(tuple(workflows), tuple(machines), behaviors, episodes=max(episodes.values()), seed=seed)
    return ExperimentConfig(
        workload=workload,
        strategies=strategies,
        episodes=episodes,
        feedback_training=_get(ep, "feedback_training", int, 10, lo=1),
        feedback_use_std=_get(fb, "use_std", bool, True),
        window=_get(doc, "window", int, 10, lo=1),
        oom_fraction=_get(doc, "oom_fraction", float, 0.5, lo=0, hi=1),
        max_attempts=_get(doc, "max_attempts", int, 8, lo=1),
        n_chunks=n_chunks,
        cpu_cap_factor=_get(b, "cpu_cap_factor", float, DEFAULT_CPU_CAP_FACTOR, lo=0.5),
        initial_action=initial,
        qlearning=qcfg,
        epsilon_decay_fraction=_get(q, "epsilon_decay_fraction", float, 0.7, lo=0, hi=1),
    )


def load_yaml(text: str):
    try:
        return yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        raise ConfigError(f"malformed YAML: {e.problem}", mark.line + 1 if mark else None) from None
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML: {e}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    return parse_config(load_yaml(text))


def bundled_config_path() -> Path:
    return Path(str(resources.files("wfsizing") / "data" / "five_workflows.yaml"))


def config_summary(cfg: ExperimentConfig) -> dict:
    """Plain-data view of every setting, recorded in reports for provenance."""
    spec = cfg.workload
    return {
        "seed": spec.seed,
        "strategies": [s.value for s in cfg.strategies],
        "episodes": {s.value: n for s, n in cfg.episodes.items()},
        "feedback_training": cfg.feedback_training,
        "feedback_use_std": cfg.feedback_use_std,
        "window": cfg.window,
        "oom_fraction": cfg.oom_fraction,
        "max_attempts": cfg.max_attempts,
        "bandit": {"n_chunks": cfg.n_chunks, "cpu_cap_factor": cfg.cpu_cap_factor,
                   "initial_action": cfg.initial_action},
        "qlearning": {"learning_rate": cfg.qlearning.learning_rate, "discount": cfg.qlearning.discount,
                      "epsilon_start": cfg.qlearning.epsilon_start, "epsilon_end": cfg.qlearning.epsilon_end,
                      "epsilon_decay_fraction": cfg.epsilon_decay_fraction},
        "machines": [{"name": m.name, "cores": m.total_cores, "mem_bytes": m.total_mem_bytes} for m in spec.machines],
        "workflows": [{"name": wf.name, "stages": [
            {"task": st.task.task_name, "instances": st.instance_count, "input_mean_bytes": st.input_mean_bytes,
             "input_cv": st.input_cv, "default_cpus": st.task.default_alloc.cpus,
             "default_mem_bytes": st.task.default_alloc.mem_bytes}
            for st in wf.stages]} for wf in spec.workflows],
    }


def override(cfg: ExperimentConfig, seed=None, strategies=None, episodes=None) -> ExperimentConfig:
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if strategies:
        cfg = replace(cfg, strategies=tuple(StrategyId(s) for s in strategies))
    if episodes is not None:
        cfg = replace(cfg, episodes={s: episodes for s in StrategyId})
    return cfg
