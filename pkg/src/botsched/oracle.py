"""Exhaustive reference solver for toy instances.

Deliberately shares no code with the planner: interval feasibility, Z_j,
cost and the weighted objective are recomputed here from scratch so the two
can certify each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from botsched.errors import OracleTooLarge
from botsched.model import EnvSpec, Placement, ScheduleSolution, TaskSpec, VmInstance

MAX_SEARCH_SPACE = 10**7
MAX_TASKS = 6
MAX_INSTANCES = 3


@dataclass
class OracleInstance:
    tasks: list[TaskSpec]
    instances: list[VmInstance]
    grid_step: int
    deadline: int

    def __post_init__(self):
        if len(self.tasks) > MAX_TASKS or len(self.instances) > MAX_INSTANCES:
            raise OracleTooLarge(
                f"oracle takes at most {MAX_TASKS} tasks and {MAX_INSTANCES} instances"
            )
        if self.grid_step <= 0:
            raise ValueError("grid_step must be > 0")


@dataclass
class OracleResult:
    solution: ScheduleSolution
    fitness: float
    leaves: list[tuple[dict[int, Placement], float]] = field(default_factory=list)


def _objective(ends: list[int], prices: list[float], cost_ub: float, deadline: int, alpha: float) -> float:
    cost = 0.0
    for z, p in zip(ends, prices):
        cost += z * p / 3600.0
    zt = max(ends) if ends else 0
    c = cost / cost_ub if cost_ub > 0 else 0.0
    return alpha * c + (1.0 - alpha) * zt / deadline


def search_space(inst: OracleInstance, env: EnvSpec, d_spot: int) -> int:
    slots = sum(vm.vtype.vcpus for vm in inst.instances)
    grid = max(0, (d_spot - env.startup_overhead) // inst.grid_step + 1)
    return (slots * grid) ** len(inst.tasks)


def brute_force_optimum(
    inst: OracleInstance,
    env: EnvSpec,
    d_spot: int,
    keep_leaves: bool = False,
    prune: bool = True,
) -> tuple[ScheduleSolution, float] | OracleResult:
    """Minimum-fitness assignment of every task to (instance, vCPU, start).

    Starts range over ``omega + k * grid_step`` plus the end points of tasks
    already placed on the same instance. Branches whose partial objective
    already reaches the incumbent are cut, so the first minimum in
    lexicographic (task, instance, vCPU, start) order is the one returned.
    With ``keep_leaves`` the full OracleResult (including every complete
    candidate reached) is returned instead of the pair; ``prune=False``
    disables the cut so that list holds every feasible assignment.
    """
    size = search_space(inst, env, d_spot)
    if size > MAX_SEARCH_SPACE:
        raise OracleTooLarge(f"search space {size} exceeds {MAX_SEARCH_SPACE}")

    omega = env.startup_overhead
    tasks = sorted(inst.tasks, key=lambda t: t.id)
    vms = inst.instances
    prices = [vm.vtype.price for vm in vms]
    mem = [vm.vtype.memory * 1024.0 for vm in vms]
    cost_ub = sum(prices) * inst.deadline / 3600.0
    grid = list(range(omega, d_spot + 1, inst.grid_step))

    # per instance: list of (start, end, vcpu, rm)
    placed: list[list[tuple[int, int, int, float]]] = [[] for _ in vms]
    ends = [0] * len(vms)
    choice: list[tuple[int, int, int]] = []
    best = {"f": math.inf, "choice": None}
    leaves: list[tuple[dict[int, Placement], float]] = []

    def fits(j: int, k: int, s: int, e: int, rm: float) -> bool:
        if rm > mem[j] + 1e-9:
            return False
        for (a, b, kk, _) in placed[j]:
            if kk == k and a < e and s < b:
                return False
        # memory peak inside [s, e) happens at s or at a later start
        for t in [s] + [a for (a, _, _, _) in placed[j] if s < a < e]:
            used = rm + sum(r for (a, b, _, r) in placed[j] if a <= t < b)
            if used > mem[j] + 1e-9:
                return False
        return True

    def dfs(i: int) -> None:
        if i == len(tasks):
            f = _objective(ends, prices, cost_ub, inst.deadline, env.alpha)
            if keep_leaves:
                leaves.append((_allocation(choice, tasks, vms), f))
            if f < best["f"]:
                best["f"] = f
                best["choice"] = list(choice)
            return
        t = tasks[i]
        for j, vm in enumerate(vms):
            e = t.exec_time[vm.vtype.id]
            starts = sorted(set(grid) | {b for (_, b, _, _) in placed[j]})
            for k in range(vm.vtype.vcpus):
                for s in starts:
                    if s < omega or s + e > d_spot:
                        continue
                    if not fits(j, k, s, s + e, t.rm):
                        continue
                    old = ends[j]
                    ends[j] = max(old, s + e)
                    if not prune or _objective(ends, prices, cost_ub, inst.deadline, env.alpha) < best["f"]:
                        placed[j].append((s, s + e, k, t.rm))
                        choice.append((j, k, s))
                        dfs(i + 1)
                        choice.pop()
                        placed[j].pop()
                    ends[j] = old

    dfs(0)

    if best["choice"] is None:
        sol = ScheduleSolution({}, list(vms), d_spot, cost_ub)
        result = OracleResult(sol, math.inf, leaves)
    else:
        alloc = _allocation(best["choice"], tasks, vms)
        per_vm_end: dict[str, int] = {}
        for tid, p in alloc.items():
            t = next(x for x in tasks if x.id == tid)
            vm = next(v for v in vms if v.id == p.instance)
            per_vm_end[vm.id] = max(per_vm_end.get(vm.id, 0), p.start + t.exec_time[vm.vtype.id])
        sol = ScheduleSolution(
            alloc, list(vms), d_spot, cost_ub, per_vm_end, max(per_vm_end.values(), default=0)
        )
        result = OracleResult(sol, best["f"], leaves)
    if keep_leaves:
        return result
    return result.solution, result.fitness


def _allocation(choice, tasks, vms) -> dict[int, Placement]:
    return {tasks[i].id: Placement(vms[j].id, k, s) for i, (j, k, s) in enumerate(choice)}


def oracle_fitness(
    sol: ScheduleSolution,
    tasks: list[TaskSpec],
    env: EnvSpec,
    deadline: int,
    d_spot: int,
    cost_ub: float | None = None,
) -> float:
    """Objective of an arbitrary explicit solution, by the oracle's own
    accounting. ``cost_ub`` defaults to the selected instances run for D."""
    by_id = {t.id: t for t in tasks}
    vms = sol.vm_map()
    order = [vm.id for vm in sol.selected_vms]
    ends = {vid: 0 for vid in order}
    for tid, p in sol.allocation.items():
        e = by_id[tid].exec_time[vms[p.instance].vtype.id]
        ends[p.instance] = max(ends[p.instance], p.start + e)
    if any(z > d_spot for z in ends.values()):
        return math.inf
    prices = [vms[v].vtype.price for v in order]
    if cost_ub is None:
        cost_ub = sum(prices) * deadline / 3600.0
    return _objective([ends[v] for v in order], prices, cost_ub, deadline, env.alpha)
