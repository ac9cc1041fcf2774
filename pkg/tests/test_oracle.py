import math

import pytest

from botsched.errors import OracleTooLarge
from botsched.model import EnvSpec, Market, TaskSpec, VmInstance, VmTypeSpec
from botsched.oracle import OracleInstance, brute_force_optimum, oracle_fitness

ENV = EnvSpec(startup_overhead=50)
VT = VmTypeSpec("v.spot", Market.SPOT, 2, 4, 0.036, 10)


def inst(tasks, deadline=1000, grid=50, vms=None):
    return OracleInstance(list(tasks), vms or [VmInstance("v#0", VT)], grid, deadline)


def test_single_task_starts_at_boot():
    t = TaskSpec(0, 1.0, {VT.id: 100})
    sol, f = brute_force_optimum(inst([t]), ENV, 800)
    assert sol.allocation[0].start == 50
    cost = VT.price * 150 / 3600
    ub = VT.price * 1000 / 3600
    assert f == pytest.approx(0.5 * cost / ub + 0.5 * 150 / 1000)


def test_identical_tasks_run_concurrently():
    ts = [TaskSpec(i, 1.0, {VT.id: 100}) for i in range(2)]
    sol, _ = brute_force_optimum(inst(ts), ENV, 800)
    assert sol.makespan == 150
    assert {p.vcpu for p in sol.allocation.values()} == {0, 1}


def test_infeasible_deadline():
    t = TaskSpec(0, 1.0, {VT.id: 100})
    sol, f = brute_force_optimum(inst([t]), ENV, 120)
    assert f == math.inf and sol.allocation == {}


def test_memory_forces_sequence():
    ts = [TaskSpec(i, 3000.0, {VT.id: 100}) for i in range(2)]
    sol, _ = brute_force_optimum(inst(ts), ENV, 800)
    assert sol.makespan == 250


def test_limits():
    ts = [TaskSpec(i, 1.0, {VT.id: 10}) for i in range(7)]
    with pytest.raises(OracleTooLarge):
        inst(ts)
    with pytest.raises(OracleTooLarge):
        brute_force_optimum(inst(ts[:6], deadline=5000, grid=1), ENV, 4000)


def test_symmetric_instances_same_optimum():
    ts = [TaskSpec(i, 1.0, {VT.id: 100 + 50 * i}) for i in range(3)]
    a = inst(ts, vms=[VmInstance("a", VT), VmInstance("b", VT)])
    b = inst(ts, vms=[VmInstance("b", VT), VmInstance("a", VT)])
    assert brute_force_optimum(a, ENV, 800)[1] == pytest.approx(brute_force_optimum(b, ENV, 800)[1])


def test_pruning_does_not_change_optimum():
    ts = [TaskSpec(i, 1500.0, {VT.id: 50 * (i + 1)}) for i in range(3)]
    fast = brute_force_optimum(inst(ts), ENV, 600)
    full = brute_force_optimum(inst(ts), ENV, 600, keep_leaves=True, prune=False)
    assert fast[1] == pytest.approx(full.fitness)
    assert min(f for _, f in full.leaves) == pytest.approx(full.fitness)


def test_oracle_fitness_matches_search():
    ts = [TaskSpec(i, 1.0, {VT.id: 100}) for i in range(2)]
    sol, f = brute_force_optimum(inst(ts), ENV, 800)
    assert oracle_fitness(sol, ts, ENV, 1000, 800, cost_ub=sol.cost_ub) == pytest.approx(f)
