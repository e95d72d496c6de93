import json
import math

import numpy as np
import pytest
from conftest import make_task, ok, oom
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wfsizing.bandit import (
    BanditAgent,
    GradientBanditState,
    MemoryBanditConfig,
    NoObservations,
    OomEscalator,
    OutOfRange,
    cpu_actions,
    cpu_reward,
    cpu_step_size,
    escalate_after_oom,
    mem_action_to_bytes,
    mem_reward,
    mem_step_size,
    nearest_action,
    policy,
    sample_action,
    update_preferences,
)
from wfsizing.core import GB, GiB, MiB, ExecutionOutcome, MachineSpec, ResourceAlloc, Status, ValidationError


def state(h, **kw):
    return GradientBanditState(list(range(1, len(h) + 1)), np.array(h, dtype=float), **kw)


# -- policy --------------------------------------------------------------------


def test_policy_examples():
    np.testing.assert_allclose(policy(state([0, 0, 0, 0])), [0.25] * 4, rtol=1e-15)
    e = math.e
    np.testing.assert_allclose(policy(state([1, 0])), [e / (e + 1), 1 / (e + 1)], rtol=1e-14)
    np.testing.assert_allclose(policy(state([-7.5] * 3)), [1 / 3] * 3, rtol=1e-15)


def test_state_invariants():
    assert np.array_equal(GradientBanditState([1, 2, 3]).preferences, np.zeros(3))
    with pytest.raises(ValidationError):
        GradientBanditState([1])
    with pytest.raises(ValidationError):
        GradientBanditState([1, 2], np.array([0.0, np.inf]))
    with pytest.raises(ValidationError):
        GradientBanditState([1, 2], np.zeros(3))


# -- sampling ------------------------------------------------------------------


def test_sample_is_reproducible():
    s = state([0, 0, 0, 0])
    a = [sample_action(s, np.random.default_rng(9)) for _ in range(3)]
    assert len(set(a)) == 1


def test_degenerate_policy_picks_first_arm():
    s = state([40.0, 0.0])
    rng = np.random.default_rng(1)
    draws = [sample_action(s, rng) for _ in range(10_000)]
    assert draws.count(0) == 10_000


def test_fair_coin_frequency_within_3_sigma():
    s = state([0.0, 0.0])
    rng = np.random.default_rng(2)
    n = 10_000
    k = sum(sample_action(s, rng) for _ in range(n))
    assert abs(k - n / 2) <= 3 * math.sqrt(n * 0.25)


def test_sample_frequencies_chi_square():
    h = [0.5, -1.0, 1.2, 0.0]
    s = state(h)
    rng = np.random.default_rng(3)
    n = 20_000
    counts = np.bincount([sample_action(s, rng) for _ in range(n)], minlength=4)
    expected = n * policy(s)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 16.27  # 3 dof, p = 0.001


# -- preference update -----------------------------------------------------------


def test_update_example_with_prior_baseline():
    s = state([0, 0, 0, 0], reward_baseline=-20.0, updates_seen=1)
    update_preferences(s, 0, -10.0, 0.1)
    np.testing.assert_allclose(s.preferences, [0.75, -0.25, -0.25, -0.25], atol=1e-15)
    assert s.reward_baseline == pytest.approx(-15.0)
    assert s.updates_seen == 2


def test_zero_advantage_leaves_preferences():
    s = state([0.3, -0.1, 0.2], reward_baseline=-4.0, updates_seen=3)
    before = s.preferences.copy()
    update_preferences(s, 1, -4.0, 0.5)
    assert np.array_equal(s.preferences, before)


def test_first_reward_seeds_the_baseline():
    s = state([0, 0, 0])
    update_preferences(s, 2, -123.0, 0.5)
    assert np.array_equal(s.preferences, np.zeros(3))
    assert s.reward_baseline == -123.0 and s.updates_seen == 1


def test_baseline_is_incremental_mean():
    s = state([0, 0])
    rewards = [-3.0, -1.0, -8.0, -2.5]
    for i, r in enumerate(rewards):
        update_preferences(s, i % 2, r, 0.1)
    assert s.reward_baseline == pytest.approx(np.mean(rewards), rel=1e-14)


@given(arrays(np.float64, st.integers(2, 16), elements=st.floats(-20, 20)), st.data(),
       st.floats(-1e3, 1e3), st.floats(1e-4, 1.0))
def test_preference_sum_conserved(h, data, reward, step):
    s = state(h, reward_baseline=data.draw(st.floats(-1e3, 1e3)), updates_seen=1)
    total = math.fsum(s.preferences)
    update_preferences(s, data.draw(st.integers(0, len(h) - 1)), reward, step)
    assert math.fsum(s.preferences) == pytest.approx(total, abs=1e-9)


@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-10, 10)), st.data(),
       st.floats(0.001, 100), st.floats(1e-3, 1.0))
def test_positive_advantage_never_lowers_chosen_probability(h, data, adv, step):
    s = state(h, reward_baseline=-50.0, updates_seen=2)
    a = data.draw(st.integers(0, len(h) - 1))
    before = policy(s)[a]
    update_preferences(s, a, -50.0 + adv, step)
    assert policy(s)[a] >= before - 1e-15


def test_update_rejects_bad_input():
    s = state([0, 0])
    with pytest.raises(OutOfRange):
        update_preferences(s, 2, -1.0, 0.1)
    with pytest.raises(ValueError):
        update_preferences(s, 0, math.nan, 0.1)
    with pytest.raises(ValueError):
        update_preferences(s, 0, -1.0, 0.0)


# -- CPU bandit ----------------------------------------------------------------


@pytest.mark.parametrize("t, cpus, usage, expected", [(100.0, 4, 250.0, -250.0), (100.0, 2, 200.0, -100.0),
                                                      (100.0, 1, 0.0, -200.0)])
def test_cpu_reward_examples(t, cpus, usage, expected):
    assert cpu_reward(ResourceAlloc(cpus, GiB), ok(t, usage)) == pytest.approx(expected)


@given(st.floats(1, 1e5), st.integers(1, 64), st.data())
def test_cpu_reward_decreases_with_idle_cores(t, cpus, data):
    # whole percents: the property is about idle cores, not float resolution
    u1 = float(data.draw(st.integers(0, 100 * cpus)))
    u2 = float(data.draw(st.integers(0, 100 * cpus)))
    if u1 == u2:
        return
    lo, hi = sorted((u1, u2))  # more usage means fewer unused cores
    a = ResourceAlloc(cpus, 1)
    assert cpu_reward(a, ok(t, lo)) < cpu_reward(a, ok(t, hi))


def test_cpu_step_size_examples():
    s = GradientBanditState([1, 2], runtime_sum_s=400.0, runtime_count=2)
    assert cpu_step_size(s) == 0.005
    assert cpu_step_size(GradientBanditState([1, 2], runtime_sum_s=50.0, runtime_count=1)) == 0.02
    with pytest.raises(NoObservations):
        cpu_step_size(GradientBanditState([1, 2]))


def test_cpu_actions_cap(machine):
    assert cpu_actions(ResourceAlloc(4, 1), machine, 2.0) == list(range(1, 9))
    assert cpu_actions(ResourceAlloc(3, 1), machine, 1.5) == [1, 2, 3, 4, 5]
    assert cpu_actions(ResourceAlloc(12, 1), machine, 2.0) == list(range(1, 17))
    assert cpu_actions(ResourceAlloc(1, 1), machine, 1.0) == [1, 2]
    with pytest.raises(ValidationError):
        cpu_actions(ResourceAlloc(1, 1), MachineSpec("tiny", 1, GB), 2.0)


# -- memory bandit -------------------------------------------------------------


def test_mem_action_examples():
    assert mem_action_to_bytes(1, MemoryBanditConfig(10, 512 * MiB, 5)) == 512 * MiB
    m = 20 * GiB
    cfg = MemoryBanditConfig.from_default(m, 10)
    assert mem_action_to_bytes(10, cfg) == m
    assert mem_action_to_bytes(3, MemoryBanditConfig(10, GiB, 5)) == 3 * GiB
    with pytest.raises(OutOfRange):
        mem_action_to_bytes(11, cfg)
    with pytest.raises(OutOfRange):
        mem_action_to_bytes(0, cfg)


def test_mem_config_defaults_and_validation():
    cfg = MemoryBanditConfig.from_default(10 * GiB)
    assert (cfg.n_chunks, cfg.chunk_bytes, cfg.initial_action) == (10, GiB, 5)
    assert MemoryBanditConfig.from_default(10 * GiB, 7).initial_action == 4
    with pytest.raises(ValidationError):
        MemoryBanditConfig(1, 10, 1)
    with pytest.raises(ValidationError):
        MemoryBanditConfig(10, 10, 11)


def test_mem_reward_examples():
    c = GiB
    cfg = MemoryBanditConfig(10, c, 5)
    assert mem_reward(4 * c, oom(4 * c), cfg) == -8.0
    assert mem_reward(4 * c, ok(peak=4 * c), cfg) == 0.0
    assert mem_reward(6 * c, ok(peak=int(2.5 * c)), cfg) == -3.5


@given(st.integers(1, 10), st.data())
def test_mem_reward_increases_with_peak(a, data):
    cfg = MemoryBanditConfig(10, 1000, 5)
    asg = a * 1000
    p1, p2 = sorted(data.draw(st.lists(st.integers(0, asg), min_size=2, max_size=2, unique=True)))
    assert mem_reward(asg, ok(peak=p1), cfg) < mem_reward(asg, ok(peak=p2), cfg)


def test_mem_step_size_examples():
    assert mem_step_size(10) == 0.1
    assert mem_step_size(1) == 1.0
    assert mem_step_size(20) == 0.05
    assert mem_step_size(MemoryBanditConfig(10, 1, 1)) == 0.1


def test_nearest_action_ties_go_up():
    cfg = MemoryBanditConfig(10, 100, 5)
    assert nearest_action(250, cfg) == 3
    assert nearest_action(249, cfg) == 2
    assert nearest_action(1, cfg) == 1
    assert nearest_action(10_000, cfg) == 10


# -- OOM escalation --------------------------------------------------------------


def test_escalation_examples():
    assert escalate_after_oom(OomEscalator(4 * GiB, 16 * GiB), 6 * GiB) == 6 * GiB
    assert escalate_after_oom(OomEscalator(4 * GiB, 16 * GiB), 3 * GiB) == 6 * GiB
    assert escalate_after_oom(OomEscalator(8 * GiB, 16 * GiB), 3 * GiB) == 16 * GiB


def test_escalator_failed_is_monotone():
    e = OomEscalator(4, 10)
    e.record_failure(2)
    assert e.failed_alloc_bytes == 4
    e.record_failure(9)
    assert e.failed_alloc_bytes == 9


@given(st.integers(1, 2**40), st.integers(1, 2**40), st.integers(1, 2**40))
def test_escalation_invariant(failed, proposal, default):
    out = escalate_after_oom(OomEscalator(failed, default), proposal)
    assert out > failed or out == default


# -- composed agent ------------------------------------------------------------


@pytest.fixture
def agent(machine):
    return BanditAgent.create(make_task(4, 10 * GiB), machine, n_chunks=10, cpu_cap_factor=2.0)


def test_agent_first_proposal_uses_initial_action(agent, rng):
    alloc = agent.propose(rng)
    assert alloc.mem_bytes == 5 * GiB
    assert alloc.cpus in agent.cpu.actions
    assert agent.cpu.actions == list(range(1, 9))


def test_agent_first_cpu_update_uses_observed_runtime(agent, rng):
    alloc = agent.propose(rng)
    r_mem, r_cpu = agent.observe(alloc, ok(200.0, 100.0 * alloc.cpus, 4 * GiB), 1)
    assert r_cpu == -200.0
    assert agent.cpu.runtime_count == 1 and cpu_step_size(agent.cpu) == 1 / 200
    assert r_mem == -1.0


def test_agent_oom_chain(agent, rng):
    alloc = agent.propose(rng)
    r_mem, r_cpu = agent.observe(alloc, oom(alloc.mem_bytes), 1)
    assert r_mem == -10.0 and r_cpu is None
    assert agent.cpu.runtime_count == 0
    allocs = [alloc]
    for attempt in range(2, 6):
        nxt = agent.retry(allocs[-1], rng)
        assert nxt.mem_bytes > allocs[-1].mem_bytes and nxt.cpus == alloc.cpus
        allocs.append(nxt)
        if nxt.mem_bytes >= 8 * GiB:
            before = agent.mem.preferences.copy()
            agent.observe(nxt, ok(100.0, 100.0, 7 * GiB), attempt)
            credited = nearest_action(nxt.mem_bytes, agent.mem_config) - 1
            moved = np.flatnonzero(agent.mem.preferences - before > 0)
            assert list(moved) in ([credited], [])
            break


def test_agent_gives_up_at_machine_size(rng):
    m = MachineSpec("small", 4, 8 * GiB)
    a = BanditAgent.create(make_task(2, 8 * GiB), m)
    a.propose(rng)
    assert a.retry(ResourceAlloc(2, 8 * GiB), rng) is None


def test_snapshot_round_trip(agent, rng, machine):
    for _ in range(20):
        alloc = agent.propose(rng)
        peak = 3 * GiB
        out = ok(100.0 / alloc.cpus + 10, 90.0, peak) if alloc.mem_bytes >= peak else oom(alloc.mem_bytes)
        agent.observe(alloc, out, 1)
    doc = json.loads(json.dumps(agent.to_snapshot()))
    clone = BanditAgent.from_snapshot(doc, agent.task, machine)
    assert np.array_equal(clone.cpu.preferences, agent.cpu.preferences)
    assert np.array_equal(clone.mem.preferences, agent.mem.preferences)
    assert clone.cpu.runtime_sum_s == agent.cpu.runtime_sum_s
    assert clone.greedy_alloc() == agent.greedy_alloc()
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert clone.propose(r1) == agent.propose(r2)
    doc["cpu"]["schema_version"] = 99
    with pytest.raises(ValidationError):
        BanditAgent.from_snapshot(doc, agent.task, machine)


def test_usage_above_allocation_passes_through():
    r = cpu_reward(ResourceAlloc(1, 1), ExecutionOutcome(100.0, 130.0, 1, Status.SUCCESS))
    assert r == pytest.approx(-70.0)
