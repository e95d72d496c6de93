import pytest

from wfsizing.config import (
    ConfigError,
    bundled_config_path,
    config_summary,
    load_config,
    load_yaml,
    override,
    parse_config,
)
from wfsizing.core import GB
from wfsizing.experiment import StrategyId

MINIMAL = """\
seed: 3
machines:
  - {name: m, cores: 8, mem_gb: 32}
workflows:
  - name: wf
    stages:
      - task: t
        instances: 2
        input_gb: 1
        default: {cpus: 2, mem_gb: 4}
        behavior: {serial_runtime_s: 100, parallel_fraction: 0.5, max_parallelism: 2, peak_mem_base_gb: 1}
"""


def parse(text):
    return parse_config(load_yaml(text))


def test_bundled_config_is_calibrated_to_3x():
    cfg = load_config(bundled_config_path())
    spec = cfg.workload
    assert len(spec.workflows) == 5 and cfg.seed == 2023
    for wf in spec.workflows:
        for st in wf.stages:
            b = spec.behaviors[st.task.behavior_ref]
            mean_peak = b.peak_mem(st.input_mean_bytes)
            assert st.task.default_alloc.mem_bytes == pytest.approx(3 * mean_peak, rel=1e-9)
            assert st.task.default_alloc.cpus >= b.max_parallelism


def test_minimal_config_defaults():
    cfg = parse(MINIMAL)
    assert cfg.seed == 3 and cfg.strategies == tuple(StrategyId)
    assert cfg.episodes[StrategyId.QLEARNING] == 100 and cfg.n_chunks == 10
    b = cfg.workload.behaviors["wf/t"]
    assert b.reference_input_bytes == GB and b.runtime_noise_cv == 0.0
    assert cfg.workload.workflows[0].stages[0].task.default_alloc.mem_bytes == 4 * GB


def test_bytes_and_gb_are_interchangeable():
    a = parse(MINIMAL)
    b = parse(MINIMAL.replace("mem_gb: 32", "mem_bytes: 32000000000"))
    assert a.workload.machines == b.workload.machines


@pytest.mark.parametrize("old, new, line, msg", [
    ("cores: 8", "cores: 0", 3, "'cores' must be >= 1"),
    ("instances: 2", "instances: two", 8, "'instances' must be int"),
    ("parallel_fraction: 0.5", "parallel_fraction: 1.5", 11, "parallel_fraction"),
    ("        input_gb: 1\n", "", 7, "missing input_gb"),
    ("{cpus: 2, mem_gb: 4}", "{cpus: 16, mem_gb: 4}", 10, "fits no machine"),
])
def test_errors_name_the_line(old, new, line, msg):
    with pytest.raises(ConfigError) as e:
        parse(MINIMAL.replace(old, new))
    assert e.value.line == line, str(e.value)
    assert msg in str(e.value)


def test_malformed_yaml_is_line_located():
    with pytest.raises(ConfigError) as e:
        load_yaml("seed: 1\nmachines: [\n  {name: m\n")
    assert e.value.line is not None and "malformed YAML" in str(e.value)


def test_unknown_strategy_and_machine():
    with pytest.raises(ConfigError, match="strategies"):
        parse("strategies: [magic]\n" + MINIMAL)
    with pytest.raises(ConfigError, match="unknown machine"):
        parse(MINIMAL.replace("instances: 2", "instances: 2\n        machine: nope"))


def test_duplicate_task_rejected():
    dup = MINIMAL + MINIMAL.split("stages:\n")[1]
    with pytest.raises(ConfigError, match="appears twice"):
        parse(dup)


def test_top_level_must_be_mapping():
    with pytest.raises(ConfigError):
        parse("- 1\n- 2\n")


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/x.yaml")


def test_override_precedence():
    cfg = parse(MINIMAL)
    o = override(cfg, seed=99, strategies=["bandits"], episodes=4)
    assert o.seed == 99 and o.strategies == (StrategyId.BANDITS,)
    assert all(n == 4 for n in o.episodes.values())
    assert override(cfg) == cfg


def test_summary_is_plain_data():
    import json

    s = config_summary(load_config(bundled_config_path()))
    assert json.loads(json.dumps(s)) == s
    assert s["bandit"]["cpu_cap_factor"] == 1.5
