"""Primary scheduling: greedy construction, iterated local search and the
burstable-instance allocation pass.

Internally a schedule is a ``Plan``: per-VM, per-vCPU queues that run back to
back from the end of the boot overhead. Only the per-vCPU loads decide Z_j,
which keeps a local-search move O(vCPUs) to evaluate.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from functools import reduce

from botsched.errors import (
    CatalogExhaustedError,
    ConstructionFailure,
    InfeasibleMapError,
)
from botsched.model import (
    SECONDS_PER_HOUR,
    EnvSpec,
    JobSpec,
    Market,
    Mode,
    Placement,
    ScheduleSolution,
    TaskSpec,
    VmInstance,
    VmTypeSpec,
    combine_objectives,
    compute_d_spot,
    pool_cost_bound,
    task_duration,
    wrr_weight,
)


@dataclass(frozen=True)
class IlsParams:
    max_iteration: int = 200
    max_attempt: int = 50
    swap_rate: float = 0.10
    max_failed: int = 20
    relax_rate: float = 0.25
    burst_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("max_iteration", "max_attempt", "max_failed"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("swap_rate", "relax_rate", "burst_rate"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in ]0, 1]")


# -- weighted round robin -----------------------------------------------------


@dataclass
class WrrState:
    """Interleaved weighted round robin over VM types with per-type quotas."""

    types: list[VmTypeSpec]
    weights: list[int]
    quota: list[int]
    cursor: int = -1
    current_weight: int = 0

    @classmethod
    def from_catalog(cls, catalog: list[VmTypeSpec], used: dict[str, int] | None = None) -> WrrState:
        types = sorted(catalog, key=lambda vt: vt.id)
        used = used or {}
        if not types:
            return cls([], [], [])
        raw = [wrr_weight(vt) for vt in types]
        top = max(raw)
        if top <= 0:
            weights = [1] * len(types)
        else:
            weights = [max(1, round(w * 100 / top)) for w in raw]
        quota = [vt.max_instances - used.get(vt.id, 0) for vt in types]
        return cls(types, weights, quota)

    @property
    def gcd(self) -> int:
        return reduce(math.gcd, self.weights) if self.weights else 1

    def remaining(self) -> int:
        return sum(max(q, 0) for q in self.quota)


def get_wrr_vm(state: WrrState, accept=None) -> VmTypeSpec:
    """Return the next type in weighted rotation that has quota left and that
    ``accept`` agrees to; the chosen type's quota is decremented.

    Types rejected by ``accept`` are skipped for the rest of this call. Raises
    ``CatalogExhaustedError`` once no candidate is left.
    """
    rejected: set[int] = set()
    n = len(state.types)
    if n == 0:
        raise CatalogExhaustedError("empty catalog")
    top, step = max(state.weights), state.gcd
    while True:
        eligible = [i for i in range(n) if state.quota[i] > 0 and i not in rejected]
        if not eligible:
            raise CatalogExhaustedError("no VM type left with remaining quota")
        state.cursor = (state.cursor + 1) % n
        if state.cursor == 0:
            state.current_weight -= step
            if state.current_weight <= 0:
                state.current_weight = top
        i = state.cursor
        if i not in eligible or state.weights[i] < state.current_weight:
            continue
        vt = state.types[i]
        if accept is None or accept(vt):
            state.quota[i] -= 1
            return vt
        rejected.add(i)


# -- plan ---------------------------------------------------------------------


class VmPlan:
    __slots__ = ("id", "vtype", "queues", "loads", "modes", "mem_total", "bounded", "keep", "z")

    def __init__(self, id: str, vtype: VmTypeSpec, bounded: bool):
        self.id = id
        self.vtype = vtype
        self.queues: list[list[int]] = [[] for _ in range(vtype.vcpus)]
        self.loads = [0] * vtype.vcpus
        self.modes: dict[int, Mode] = {}
        self.mem_total = 0.0
        self.bounded = bounded
        self.keep = False
        self.z = 0

    def copy(self) -> VmPlan:
        c = VmPlan.__new__(VmPlan)
        c.id, c.vtype, c.bounded, c.keep, c.z = self.id, self.vtype, self.bounded, self.keep, self.z
        c.queues = [q[:] for q in self.queues]
        c.loads = self.loads[:]
        c.modes = dict(self.modes)
        c.mem_total = self.mem_total
        return c

    def empty(self) -> bool:
        return not any(self.queues)


class Plan:
    def __init__(self, job: JobSpec, env: EnvSpec, cost_ub: float):
        self.job = job
        self.env = env
        self.cost_ub = cost_ub
        self.tasks = job.by_id()
        self.vms: list[VmPlan] = []
        self.where: dict[int, tuple[int, int]] = {}
        self.type_count: dict[str, int] = {}

    def copy(self) -> Plan:
        c = Plan.__new__(Plan)
        c.job, c.env, c.cost_ub, c.tasks = self.job, self.env, self.cost_ub, self.tasks
        c.vms = [vm.copy() for vm in self.vms]
        c.where = dict(self.where)
        c.type_count = dict(self.type_count)
        return c

    # structure

    def add_vm(self, vtype: VmTypeSpec, bounded: bool = True) -> int:
        k = self.type_count.get(vtype.id, 0)
        self.type_count[vtype.id] = k + 1
        self.vms.append(VmPlan(f"{vtype.id}#{k}", vtype, bounded))
        return len(self.vms) - 1

    def duration(self, tid: int, vm: VmPlan, mode: Mode | None = None) -> int:
        if mode is None:
            mode = vm.modes.get(tid, Mode.BURST)
        return task_duration(self.tasks[tid], vm.vtype, mode)

    def _refresh(self, vm: VmPlan) -> None:
        vm.z = self.env.startup_overhead + max(vm.loads) if not vm.empty() else 0

    def memory_ok(self, vm: VmPlan) -> bool:
        if vm.mem_total <= vm.vtype.memory_mb + 1e-9:
            return True
        points = []
        for q in vm.queues:
            t = self.env.startup_overhead
            for tid in q:
                d = self.duration(tid, vm)
                rm = self.tasks[tid].rm
                points.append((t, rm))
                points.append((t + d, -rm))
                t += d
        points.sort(key=lambda p: (p[0], p[1]))
        used = 0.0
        for _, delta in points:
            used += delta
            if used > vm.vtype.memory_mb + 1e-9:
                return False
        return True

    def finish_times(self, vm: VmPlan) -> dict[int, int]:
        out = {}
        for q in vm.queues:
            t = self.env.startup_overhead
            for tid in q:
                t += self.duration(tid, vm)
                out[tid] = t
        return out

    # moves

    def append(self, tid: int, vi: int, mode: Mode = Mode.BURST, bound: int | None = None) -> bool:
        """Append ``tid`` to the earliest-ending vCPU of VM ``vi`` that keeps
        memory feasible (and finish <= bound if given)."""
        vm = self.vms[vi]
        d = task_duration(self.tasks[tid], vm.vtype, mode)
        rm = self.tasks[tid].rm
        if rm > vm.vtype.memory_mb + 1e-9:
            return False
        order = sorted(range(len(vm.loads)), key=lambda k: (vm.loads[k], k))
        for k in order:
            if bound is not None and self.env.startup_overhead + vm.loads[k] + d > bound:
                break
            vm.queues[k].append(tid)
            vm.loads[k] += d
            vm.mem_total += rm
            if mode is not Mode.BURST:
                vm.modes[tid] = mode
            if self.memory_ok(vm):
                self.where[tid] = (vi, k)
                self._refresh(vm)
                return True
            vm.queues[k].pop()
            vm.loads[k] -= d
            vm.mem_total -= rm
            vm.modes.pop(tid, None)
        return False

    def remove(self, tid: int) -> tuple[int, int, int, Mode]:
        vi, k = self.where.pop(tid)
        vm = self.vms[vi]
        mode = vm.modes.pop(tid, Mode.BURST)
        pos = vm.queues[k].index(tid)
        del vm.queues[k][pos]
        vm.loads[k] -= task_duration(self.tasks[tid], vm.vtype, mode)
        vm.mem_total -= self.tasks[tid].rm
        self._refresh(vm)
        return vi, k, pos, mode

    def restore(self, tid: int, vi: int, k: int, pos: int, mode: Mode) -> None:
        vm = self.vms[vi]
        vm.queues[k].insert(pos, tid)
        vm.loads[k] += task_duration(self.tasks[tid], vm.vtype, mode)
        vm.mem_total += self.tasks[tid].rm
        if mode is not Mode.BURST:
            vm.modes[tid] = mode
        self.where[tid] = (vi, k)
        self._refresh(vm)

    # objective

    def cost(self) -> float:
        return sum(vm.z * vm.vtype.price for vm in self.vms) / SECONDS_PER_HOUR

    def makespan(self) -> int:
        return max((vm.z for vm in self.vms), default=0)

    def fitness(self, bound: float) -> float:
        for vm in self.vms:
            if vm.bounded and vm.z > bound:
                return math.inf
        return combine_objectives(
            self.cost(), self.makespan(), self.cost_ub, self.job.deadline, self.env.alpha
        )

    # conversion

    def to_solution(self, d_spot: int) -> ScheduleSolution:
        allocation: dict[int, Placement] = {}
        selected: list[VmInstance] = []
        per_vm_end: dict[str, int] = {}
        for vm in self.vms:
            if vm.empty() and not vm.keep:
                continue
            inst = VmInstance(id=vm.id, vtype=vm.vtype, ac_len=self.env.ac_len)
            for k, q in enumerate(vm.queues):
                t = self.env.startup_overhead
                for tid in q:
                    mode = vm.modes.get(tid, Mode.BURST)
                    allocation[tid] = Placement(vm.id, k, t, mode)
                    inst.queues[k].append((tid, mode))
                    t += self.duration(tid, vm, mode)
            selected.append(inst)
            if not vm.empty():
                per_vm_end[vm.id] = vm.z
        return ScheduleSolution(
            allocation=allocation,
            selected_vms=selected,
            d_spot=d_spot,
            cost_ub=self.cost_ub,
            per_vm_end=per_vm_end,
            makespan=max(per_vm_end.values(), default=0),
        )

    @classmethod
    def from_solution(cls, sol: ScheduleSolution, job: JobSpec, env: EnvSpec, bounded_markets=(Market.SPOT,)) -> Plan:
        plan = cls(job, env, sol.cost_ub)
        index: dict[str, int] = {}
        for inst in sol.selected_vms:
            vm = VmPlan(inst.id, inst.vtype, inst.market in bounded_markets)
            vm.keep = inst.market is Market.BURSTABLE
            index[inst.id] = len(plan.vms)
            plan.vms.append(vm)
            prefix, _, num = inst.id.rpartition("#")
            if num.isdigit():
                plan.type_count[inst.vtype.id] = max(plan.type_count.get(inst.vtype.id, 0), int(num) + 1)
            else:
                plan.type_count[inst.vtype.id] = plan.type_count.get(inst.vtype.id, 0) + 1
        ordered = sorted(sol.allocation.items(), key=lambda kv: (kv[1].start, kv[0]))
        for tid, p in ordered:
            vi = index[p.instance]
            vm = plan.vms[vi]
            vm.queues[p.vcpu].append(tid)
            vm.loads[p.vcpu] += task_duration(plan.tasks[tid], vm.vtype, p.mode)
            vm.mem_total += plan.tasks[tid].rm
            if p.mode is not Mode.BURST:
                vm.modes[tid] = p.mode
            plan.where[tid] = (vi, p.vcpu)
        for vm in plan.vms:
            plan._refresh(vm)
        return plan


# -- initial solution -----------------------------------------------------------


def _pool(catalog: list[VmTypeSpec], market: Market) -> list[VmTypeSpec]:
    return sorted((vt for vt in catalog if vt.market is market), key=lambda vt: vt.id)


def check_schedule(task: TaskSpec, instance: VmInstance, d_spot: int, job: JobSpec, env: EnvSpec) -> bool:
    """True iff the task can be appended to some vCPU of ``instance`` without
    breaking memory at any period or finishing after ``d_spot``."""
    plan = Plan(job, env, 0.0)
    vi = plan.add_vm(instance.vtype)
    vm = plan.vms[vi]
    for k, q in enumerate(instance.queues):
        for tid, mode in q:
            vm.queues[k].append(tid)
            vm.loads[k] += task_duration(plan.tasks[tid], vm.vtype, mode)
            vm.mem_total += plan.tasks[tid].rm
            if mode is not Mode.BURST:
                vm.modes[tid] = mode
    tasks = dict(plan.tasks)
    tasks[task.id] = task
    plan.tasks = tasks
    return plan.append(task.id, vi, bound=d_spot)


def _initial_plan(job: JobSpec, pool: list[VmTypeSpec], d_spot: int, env: EnvSpec, cost_ub: float) -> Plan:
    plan = Plan(job, env, cost_ub)
    if not job.tasks:
        return plan
    state = WrrState.from_catalog(pool)
    order = sorted(job.tasks, key=lambda t: (-t.rm, t.id))
    for task in order:
        # phase 1: cheapest already-selected VM first
        placed = False
        for vi in sorted(range(len(plan.vms)), key=lambda i: (plan.vms[i].vtype.price, plan.vms[i].id)):
            if plan.append(task.id, vi, bound=d_spot):
                placed = True
                break
        if placed:
            continue
        # phase 2: fresh VM from the weighted rotation
        def fits(vt: VmTypeSpec) -> bool:
            d = task.exec_time[vt.id]
            return task.rm <= vt.memory_mb + 1e-9 and env.startup_overhead + d <= d_spot

        try:
            vt = get_wrr_vm(state, accept=fits)
        except CatalogExhaustedError as exc:
            raise ConstructionFailure(task.id, f"no pool VM can take it within {d_spot}s ({exc})") from None
        vi = plan.add_vm(vt)
        if not plan.append(task.id, vi, bound=d_spot):  # pragma: no cover - fits() guarantees this
            raise ConstructionFailure(task.id, "fresh VM rejected the task")
    return plan


def initial_solution(job: JobSpec, spot_catalog: list[VmTypeSpec], d_spot: int, env: EnvSpec) -> ScheduleSolution:
    """Greedy map: tasks by descending memory, first-fit on the cheapest
    selected VM, otherwise a fresh VM drawn by weighted round robin."""
    if d_spot <= env.startup_overhead:
        raise ConstructionFailure(None, f"D_spot={d_spot} leaves no time after boot")
    pool = [vt for vt in spot_catalog if vt.market is Market.SPOT] or list(spot_catalog)
    cost_ub = pool_cost_bound(pool, job.deadline)
    return _initial_plan(job, pool, d_spot, env, cost_ub).to_solution(d_spot)


# -- local search and ILS ---------------------------------------------------------


def _local_search(plan: Plan, max_attempt: int, swap_rate: float, bound: float, rng: random.Random) -> Plan:
    task_ids = sorted(plan.tasks)
    if not plan.vms or not task_ids:
        return plan
    n = max(2, math.ceil(swap_rate * len(task_ids)))
    dest = rng.randrange(len(plan.vms))
    best = plan.fitness(bound)
    for _ in range(max_attempt):
        # one attempt is a chain of n moves from the incumbent; the best point
        # on the chain (ties included, so plateaus can be crossed) is kept and
        # the rest of the chain is rolled back
        pending: list[tuple[int, tuple]] = []
        for _ in range(n):
            tid = rng.choice(task_ids)
            undo = plan.remove(tid)
            if not plan.append(tid, dest):
                plan.restore(tid, *undo)
                continue
            pending.append((tid, undo))
            f = plan.fitness(bound)
            if f <= best and f < math.inf:
                best = f
                pending.clear()
        for tid, undo in reversed(pending):
            plan.remove(tid)
            plan.restore(tid, *undo)
    return plan


def local_search(
    sol: ScheduleSolution,
    max_attempt: int,
    swap_rate: float,
    d_spot: int,
    rng: random.Random,
    job: JobSpec,
    env: EnvSpec,
) -> ScheduleSolution:
    plan = Plan.from_solution(sol, job, env)
    return _local_search(plan, max_attempt, swap_rate, d_spot, rng).to_solution(sol.d_spot)


@dataclass
class IlsTrace:
    """What happened inside one ILS run; handy for tests and debugging."""

    initial_fitness: float = math.inf
    best_fitness: float = math.inf
    relaxed_bounds: list[float] = field(default_factory=list)
    improvements: list[int] = field(default_factory=list)


def _ils_plan(
    job: JobSpec,
    catalog: list[VmTypeSpec],
    params: IlsParams,
    env: EnvSpec,
    pool_market: Market = Market.SPOT,
    trace: IlsTrace | None = None,
) -> tuple[Plan, int]:
    d_spot = compute_d_spot(job, catalog, env)
    # spot pools plan against D_spot, anything else only against D
    limit = d_spot if pool_market is Market.SPOT else job.deadline
    pool = _pool(catalog, pool_market)
    cost_ub = pool_cost_bound(pool, job.deadline)
    rng = random.Random(params.seed)
    trace = trace if trace is not None else IlsTrace()

    plan = _initial_plan(job, pool, limit, env, cost_ub)
    trace.initial_fitness = plan.fitness(limit)
    plan = _local_search(plan, params.max_attempt, params.swap_rate, limit, rng)
    best, best_fit = plan.copy(), plan.fitness(limit)
    relaxed = float(limit)
    last_best = 0
    spare = [vt for vt in pool for _ in range(vt.max_instances - plan.type_count.get(vt.id, 0))]

    for i in range(params.max_iteration):
        if spare:
            vt = spare.pop(rng.randrange(len(spare)))
            plan.add_vm(vt)
        if i - last_best > params.max_failed:
            relaxed += params.relax_rate * relaxed
        trace.relaxed_bounds.append(relaxed)
        plan = _local_search(plan, params.max_attempt, params.swap_rate, relaxed, rng)
        f = plan.fitness(limit)
        if f < best_fit:
            best, best_fit = plan.copy(), f
            last_best = i
            trace.improvements.append(i)
    trace.best_fitness = best_fit
    return best, d_spot


def ils(
    job: JobSpec,
    catalog: list[VmTypeSpec],
    params: IlsParams,
    env: EnvSpec,
    pool_market: Market = Market.SPOT,
    trace: IlsTrace | None = None,
) -> ScheduleSolution:
    best, d_spot = _ils_plan(job, catalog, params, env, pool_market, trace)
    return best.to_solution(d_spot)


# -- burstable allocation -------------------------------------------------------


def _burst_allocation(
    plan: Plan,
    burst_rate: float,
    burst_catalog: list[VmTypeSpec],
    ondemand_catalog: list[VmTypeSpec],
    d_spot: int,
    deadline: int,
) -> Plan:
    omega = plan.env.startup_overhead
    used = sum(1 for vm in plan.vms if not vm.empty())
    n = math.ceil(burst_rate * used)

    bursts: list[int] = []
    for vt in sorted(burst_catalog, key=lambda vt: (vt.price, vt.id)):
        while len(bursts) < n and plan.type_count.get(vt.id, 0) < vt.max_instances:
            vi = plan.add_vm(vt, bounded=False)
            plan.vms[vi].keep = True
            bursts.append(vi)
    free = list(bursts)
    ondemand = sorted(ondemand_catalog, key=lambda vt: (vt.price, vt.id))
    launched_od: list[int] = []

    def violators() -> list[tuple[int, int]]:
        out = []
        for vm in plan.vms:
            if vm.bounded and vm.z > d_spot:
                for tid, fin in plan.finish_times(vm).items():
                    if fin > d_spot:
                        out.append((fin, tid))
        out.sort(key=lambda x: (-x[0], x[1]))
        return out

    while True:
        bad = violators()
        if not bad:
            break
        _, tid = bad[0]
        undo = plan.remove(tid)
        moved = False
        for vi in list(free):
            if plan.append(tid, vi, Mode.BASELINE, bound=deadline):
                free.remove(vi)
                moved = True
                break
        if not moved:
            for vi in launched_od:
                if plan.append(tid, vi, bound=deadline):
                    moved = True
                    break
        if not moved:
            for vt in ondemand:
                if plan.type_count.get(vt.id, 0) >= vt.max_instances:
                    continue
                if omega + plan.tasks[tid].exec_time[vt.id] > deadline:
                    continue
                vi = plan.add_vm(vt, bounded=False)
                if plan.append(tid, vi, bound=deadline):
                    launched_od.append(vi)
                    moved = True
                    break
                plan.vms.pop()
                plan.type_count[vt.id] -= 1
        if not moved:
            plan.restore(tid, *undo)
            raise InfeasibleMapError(f"task {tid} violates D_spot and no burstable or on-demand VM can take it")

    for vi in free:
        candidates = []
        for vm in plan.vms:
            if vm.bounded:
                candidates.extend((fin, tid) for tid, fin in plan.finish_times(vm).items())
        candidates.sort(key=lambda x: (-x[0], x[1]))
        for _, tid in candidates:
            undo = plan.remove(tid)
            if plan.append(tid, vi, Mode.BASELINE, bound=d_spot):
                break
            plan.restore(tid, *undo)
    return plan


def burst_allocation(
    sol: ScheduleSolution,
    burst_rate: float,
    burst_catalog: list[VmTypeSpec],
    d_spot: int,
    deadline: int,
    job: JobSpec,
    env: EnvSpec,
    ondemand_catalog: list[VmTypeSpec] = (),
) -> ScheduleSolution:
    """Add ceil(burst_rate * |used VMs|) burstable instances, move D_spot
    violators onto them (one baseline task each) or onto cheap on-demand VMs,
    then hand each still-empty burstable the latest-finishing task."""
    plan = Plan.from_solution(sol, job, env)
    plan = _burst_allocation(plan, burst_rate, list(burst_catalog), list(ondemand_catalog), d_spot, deadline)
    return plan.to_solution(d_spot)


def primary_map(
    job: JobSpec,
    catalog: list[VmTypeSpec],
    params: IlsParams,
    env: EnvSpec,
    trace: IlsTrace | None = None,
) -> ScheduleSolution:
    """ILS over the spot pool followed by the burstable allocation pass."""
    best, d_spot = _ils_plan(job, catalog, params, env, Market.SPOT, trace)
    plan = _burst_allocation(
        best,
        params.burst_rate,
        _pool(catalog, Market.BURSTABLE),
        _pool(catalog, Market.ON_DEMAND),
        d_spot,
        job.deadline,
    )
    return plan.to_solution(d_spot)
