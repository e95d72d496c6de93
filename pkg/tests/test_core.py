import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wfsizing.core import (
    GB,
    GiB,
    AgentKey,
    ExecutionOutcome,
    MachineSpec,
    ResourceAlloc,
    Status,
    ValidationError,
    cpu_hours,
    cpu_unused,
    mem_gbh,
    mem_utilization,
)


def out(usage=100.0, peak=1, runtime=10.0):
    return ExecutionOutcome(runtime, usage, peak)


@pytest.mark.parametrize("cpus, usage, expected", [(4, 250.0, 1.5), (2, 200.0, 0.0), (1, 130.0, -0.3)])
def test_cpu_unused_examples(cpus, usage, expected):
    assert cpu_unused(ResourceAlloc(cpus, GiB), out(usage)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("mem, peak, expected", [(8 * GiB, 4 * GiB, 0.5), (3 * GiB, 3 * GiB, 1.0),
                                                 (4 * GiB, GiB, 0.25)])
def test_mem_utilization_examples(mem, peak, expected):
    assert mem_utilization(ResourceAlloc(1, mem), out(peak=peak)) == expected


@pytest.mark.parametrize("cores, t, expected", [(4, 3600, 4.0), (0, 1234.5, 0.0), (2.5, 1800, 1.25)])
def test_cpu_hours_examples(cores, t, expected):
    assert cpu_hours(cores, t) == expected


@pytest.mark.parametrize("mem, t, expected", [(10**9, 3600, 1.0), (0, 77.0, 0.0), (2 * 10**9, 7200, 4.0)])
def test_mem_gbh_examples(mem, t, expected):
    assert mem_gbh(mem, t) == expected


def test_gb_is_decimal():
    assert GB == 10**9 and GiB == 2**30


@given(st.integers(1, 512), st.floats(0, 51200, allow_nan=False))
def test_unused_plus_used_is_allocation(cpus, usage):
    o = out(usage)
    assert abs(cpu_unused(ResourceAlloc(cpus, 1), o) + o.cpu_usage_pct / 100 - cpus) <= 1e-9


@given(st.integers(1, 2**40), st.integers(0, 2**40))
def test_mem_utilization_scale_invariant(mem, peak):
    a = mem_utilization(ResourceAlloc(1, mem), out(peak=peak))
    b = mem_utilization(ResourceAlloc(1, 2 * mem), out(peak=2 * peak))
    assert a == pytest.approx(b, rel=1e-15)


@given(st.floats(0, 1e4), st.floats(0, 1e6), st.floats(0, 10))
def test_hours_are_linear(x, t, k):
    assert cpu_hours(k * x, t) == pytest.approx(k * cpu_hours(x, t), rel=1e-12, abs=1e-12)
    assert cpu_hours(x, k * t) == pytest.approx(k * cpu_hours(x, t), rel=1e-12, abs=1e-12)
    assert mem_gbh(k * x * GB, t) == pytest.approx(k * mem_gbh(x * GB, t), rel=1e-12, abs=1e-12)


def test_validation():
    with pytest.raises(ValidationError):
        ResourceAlloc(0, 1)
    with pytest.raises(ValidationError):
        ResourceAlloc(1, 0)
    with pytest.raises(ValidationError):
        MachineSpec("m", 0, 1)
    with pytest.raises(ValidationError):
        ExecutionOutcome(0.0, 0.0, 0, Status.SUCCESS)
    with pytest.raises(ValidationError):
        ExecutionOutcome(1.0, -1.0, 0)
    # an OOM kill may happen at t=0
    assert not ExecutionOutcome(0.0, 0.0, 5, Status.OOM).ok


def test_fits_and_key():
    m = MachineSpec("m", 8, 16 * GB)
    assert ResourceAlloc(8, 16 * GB).fits(m)
    assert not ResourceAlloc(9, GB).fits(m)
    assert not ResourceAlloc(1, 16 * GB + 1).fits(m)
    assert str(AgentKey("wf/align", "m")) == "wf/align@m"
    assert sorted([AgentKey("b", "m"), AgentKey("a", "z")])[0].task_name == "a"


def test_values_are_immutable():
    a = ResourceAlloc(1, 1)
    with pytest.raises(AttributeError):
        a.cpus = 2
    assert math.isclose(out(250.0).used_cores, 2.5)
