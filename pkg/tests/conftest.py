import numpy as np
import pytest
from hypothesis import settings

from wfsizing import _kernels
from wfsizing.core import GB, GiB, ExecutionOutcome, MachineSpec, ResourceAlloc, Status, TaskProfile

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


def make_task(cpus=4, mem=8 * GiB, name="t", workflow="wf"):
    return TaskProfile(workflow, name, ResourceAlloc(cpus, mem), f"{workflow}/{name}")


def ok(runtime=100.0, usage=100.0, peak=GiB):
    return ExecutionOutcome(runtime, usage, peak, Status.SUCCESS)


def oom(alloc_mem, runtime=50.0, usage=100.0):
    return ExecutionOutcome(runtime, usage, alloc_mem, Status.OOM)


@pytest.fixture
def machine():
    return MachineSpec("node16", 16, 128 * GB)


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    """Kernel table for each backend, so kernel tests run against both."""
    return _kernels.NUMPY_BACKEND if request.param == "numpy" else _kernels.NUMBA_BACKEND


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(cid: str, passed: bool, detail: str) -> bool:
        line = f"CRITERION {cid}: {'PASS' if passed else 'FAIL'}  {detail}"
        store[cid] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(store, key=lambda c: (int(c.rstrip("abcd")), c)):
        terminalreporter.write_line(store[cid])
