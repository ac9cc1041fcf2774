"""Domain types for deadline-constrained bag-of-tasks scheduling, plus the
constraint validator used by both the metaheuristic and the oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from botsched.errors import (
    InfeasibleDeadlineError,
    UndefinedWeightError,
    ValidationError,
)

MB_PER_GB = 1024.0
SECONDS_PER_HOUR = 3600.0


class Market(str, Enum):
    SPOT = "spot"
    ON_DEMAND = "on-demand"
    BURSTABLE = "burstable"


class VmState(str, Enum):
    BUSY = "busy"
    IDLE = "idle"
    HIBERNATED = "hibernated"
    TERMINATED = "terminated"


class Mode(str, Enum):
    BURST = "burst"
    BASELINE = "baseline"


@dataclass(frozen=True)
class TaskSpec:
    """One task of the bag: memory footprint in MB and full-speed duration
    (seconds) for every VM type of the catalog."""

    id: int
    rm: float
    exec_time: dict[str, int]

    def __post_init__(self):
        if self.rm <= 0:
            raise ValueError(f"task {self.id}: rm must be > 0")
        for vt, e in self.exec_time.items():
            if e <= 0:
                raise ValueError(f"task {self.id}: duration on {vt} must be > 0")

    def __hash__(self):
        return hash(self.id)


@dataclass(frozen=True)
class VmTypeSpec:
    id: str
    market: Market
    vcpus: int
    memory: float  # GB
    price: float  # USD per hour
    gflops: float
    baseline_fraction: float = 1.0
    credit_accrual: float = 0.0  # credits per hour
    initial_credits: float = 0.0
    burst_period: int = 60
    max_instances: int = 5

    def __post_init__(self):
        object.__setattr__(self, "market", Market(self.market))
        if self.vcpus < 1:
            raise ValueError(f"{self.id}: vcpus must be >= 1")
        if self.price < 0:
            raise ValueError(f"{self.id}: price must be >= 0")
        if not 0 < self.baseline_fraction <= 1:
            raise ValueError(f"{self.id}: baseline_fraction must be in ]0, 1]")
        if (self.market is Market.BURSTABLE) != (self.baseline_fraction < 1):
            raise ValueError(
                f"{self.id}: burstable types and only those have baseline_fraction < 1"
            )
        if self.max_instances < 1:
            raise ValueError(f"{self.id}: max_instances must be >= 1")
        if self.burst_period <= 0:
            raise ValueError(f"{self.id}: burst_period must be > 0")

    @property
    def burstable(self) -> bool:
        return self.market is Market.BURSTABLE

    @property
    def memory_mb(self) -> float:
        return self.memory * MB_PER_GB

    @property
    def core_gflops(self) -> float:
        return self.gflops / self.vcpus


@dataclass(frozen=True)
class JobSpec:
    tasks: tuple[TaskSpec, ...]
    deadline: int

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task ids in job")

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise ValidationError(f"unknown task id {task_id}")

    def by_id(self) -> dict[int, TaskSpec]:
        return {t.id: t for t in self.tasks}


@dataclass(frozen=True)
class EnvSpec:
    startup_overhead: int = 60
    alpha: float = 0.5
    billing_granularity: int = 1
    ac_len: int = 900
    ckpt_overhead_budget: float = 0.10
    ckpt_unit_cost: int = 5

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.startup_overhead < 0:
            raise ValueError("startup_overhead must be >= 0")
        if self.ac_len <= 0:
            raise ValueError("ac_len must be > 0")
        if self.billing_granularity < 1:
            raise ValueError("billing_granularity must be >= 1")


@dataclass
class VmInstance:
    """A launched (or planned) VM. Queues hold ``(task_id, mode)`` pairs per vCPU."""

    id: str
    vtype: VmTypeSpec
    state: VmState = VmState.IDLE
    launched_at: int = 0
    cc: float = math.inf
    reserved_credits: float = 0.0
    queues: list[list[tuple[int, Mode]]] = field(default_factory=list)
    ac_len: int = 900
    hibernation_intervals: list[tuple[int, int | None]] = field(default_factory=list)

    def __post_init__(self):
        if not self.queues:
            self.queues = [[] for _ in range(self.vtype.vcpus)]
        if self.vtype.burstable and math.isinf(self.cc):
            self.cc = float(self.vtype.initial_credits)

    @property
    def type(self) -> str:
        return self.vtype.id

    @property
    def market(self) -> Market:
        return self.vtype.market


@dataclass(frozen=True)
class Placement:
    instance: str
    vcpu: int
    start: int
    mode: Mode = Mode.BURST


@dataclass
class ScheduleSolution:
    """Explicit form of the assignment: task -> (instance, vCPU, start)."""

    allocation: dict[int, Placement]
    selected_vms: list[VmInstance]
    d_spot: int
    cost_ub: float
    per_vm_end: dict[str, int] = field(default_factory=dict)
    makespan: int = 0

    def vm(self, instance_id: str) -> VmInstance:
        for vm in self.selected_vms:
            if vm.id == instance_id:
                return vm
        raise ValidationError(f"unknown instance id {instance_id!r}")

    def vm_map(self) -> dict[str, VmInstance]:
        return {vm.id: vm for vm in self.selected_vms}


def task_duration(task: TaskSpec, vtype: VmTypeSpec, mode: Mode = Mode.BURST) -> int:
    e = task.exec_time[vtype.id]
    if mode is Mode.BASELINE:
        return math.ceil(e / vtype.baseline_fraction - 1e-9)
    return e


def _intervals(sol: ScheduleSolution, job: JobSpec):
    """Yield (task, vm, placement, end) for every allocated task."""
    tasks = job.by_id()
    vms = sol.vm_map()
    for tid, p in sol.allocation.items():
        if tid not in tasks:
            raise ValidationError(f"unknown task id {tid}")
        if p.instance not in vms:
            raise ValidationError(f"unknown instance id {p.instance!r}")
        vm = vms[p.instance]
        t = tasks[tid]
        yield t, vm, p, p.start + task_duration(t, vm.vtype, p.mode)


def evaluate(sol: ScheduleSolution, job: JobSpec) -> ScheduleSolution:
    """Populate ``per_vm_end`` (Z_j) and ``makespan`` (ZT) in place."""
    ends: dict[str, int] = {}
    for _, vm, _, end in _intervals(sol, job):
        ends[vm.id] = max(ends.get(vm.id, 0), end)
    sol.per_vm_end = ends
    sol.makespan = max(ends.values(), default=0)
    return sol


def validate_memory(sol: ScheduleSolution, job: JobSpec, t: int) -> bool:
    used: dict[str, float] = {}
    vms = sol.vm_map()
    for task, vm, p, end in _intervals(sol, job):
        if p.start <= t < end:
            used[vm.id] = used.get(vm.id, 0.0) + task.rm
    return all(mb <= vms[vid].vtype.memory_mb + 1e-9 for vid, mb in used.items())


def validate_vcpu(sol: ScheduleSolution, job: JobSpec, t: int) -> bool:
    per_vm: dict[str, list[int]] = {}
    vms = sol.vm_map()
    for _, vm, p, end in _intervals(sol, job):
        if p.start <= t < end:
            per_vm.setdefault(vm.id, []).append(p.vcpu)
    for vid, cores in per_vm.items():
        if len(cores) > vms[vid].vtype.vcpus or len(set(cores)) != len(cores):
            return False
    return True


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def __bool__(self):
        return bool(self.violations)

    def kinds(self) -> set[str]:
        return {v.split(":", 1)[0] for v in self.violations}


def validate_solution(
    sol: ScheduleSolution,
    job: JobSpec,
    env: EnvSpec,
    duplicates: list[tuple[int, Placement]] | None = None,
) -> ValidationReport:
    """Check memory, vCPU, unique-allocation, D_spot and makespan constraints.

    ``duplicates`` lets callers hand in extra (task, placement) pairs for a task
    that was already allocated. The dict form of ``allocation`` cannot hold
    them, so this is the only way to express a doubly-started task.
    """
    report = ValidationReport()
    tasks = job.by_id()
    vms = sol.vm_map()

    try:
        rows = list(_intervals(sol, job))
    except ValidationError as exc:
        report.violations.append(f"unique: {exc}")
        return report

    for tid, p in duplicates or ():
        report.violations.append(f"unique: task {tid} started more than once")
        if p.instance in vms and tid in tasks:
            vm = vms[p.instance]
            rows.append((tasks[tid], vm, p, p.start + task_duration(tasks[tid], vm.vtype, p.mode)))

    missing = set(tasks) - set(sol.allocation)
    for tid in sorted(missing):
        report.violations.append(f"unique: task {tid} not allocated")

    by_vm: dict[str, list] = {}
    for row in rows:
        by_vm.setdefault(row[1].id, []).append(row)

    for vid in sorted(by_vm):
        vm = vms[vid]
        items = by_vm[vid]
        for _, _, p, _ in items:
            if not 0 <= p.vcpu < vm.vtype.vcpus:
                report.violations.append(f"vcpu: {vid} has no vCPU {p.vcpu}")
            if p.start < env.startup_overhead + vm.launched_at:
                report.violations.append(
                    f"vcpu: task on {vid} starts at {p.start} before boot completes"
                )
        # occupancy only changes at starts, so checking those points suffices
        points = sorted({p.start for _, _, p, _ in items})
        for t in points:
            live = [(task, p) for task, _, p, end in items if p.start <= t < end]
            mem = sum(task.rm for task, _ in live)
            if mem > vm.vtype.memory_mb + 1e-9:
                report.violations.append(
                    f"memory: {vid} uses {mem:.2f}MB > {vm.vtype.memory_mb:.2f}MB at t={t}"
                )
            cores = [p.vcpu for _, p in live]
            if len(cores) > vm.vtype.vcpus or len(set(cores)) != len(cores):
                report.violations.append(f"vcpu: {vid} oversubscribed at t={t}")

    evaluate_ends: dict[str, int] = {}
    for _, vm, _, end in rows:
        evaluate_ends[vm.id] = max(evaluate_ends.get(vm.id, 0), end)
    for vid in sorted(evaluate_ends):
        z = evaluate_ends[vid]
        bound = sol.d_spot if vms[vid].market is Market.SPOT else job.deadline
        if z > bound:
            report.violations.append(f"deadline: Z[{vid}]={z} > {bound}")
    zt = max(evaluate_ends.values(), default=0)
    if sol.per_vm_end and sol.per_vm_end != evaluate_ends:
        report.violations.append("makespan: per_vm_end does not match allocation")
    if sol.makespan and sol.makespan != zt:
        report.violations.append(f"makespan: ZT={sol.makespan} != max Z_j={zt}")
    if zt > job.deadline:
        report.violations.append(f"makespan: ZT={zt} > D={job.deadline}")
    return report


def compute_d_spot(job: JobSpec, catalog: list[VmTypeSpec], env: EnvSpec) -> int:
    """Deadline minus the time needed to rerun the longest task on the slowest
    type after a fresh boot."""
    if not any(vt.market is not Market.SPOT for vt in catalog):
        raise ValueError("catalog needs at least one non-spot VM type")
    worst = max((t.exec_time[vt.id] for t in job.tasks for vt in catalog), default=0)
    d_spot = job.deadline - (env.startup_overhead + worst)
    if d_spot <= 0:
        raise InfeasibleDeadlineError(
            f"deadline {job.deadline} leaves no slack for a worst-case migration "
            f"(omega={env.startup_overhead}, longest task={worst})"
        )
    return d_spot


def pool_cost_bound(pool: list[VmTypeSpec], deadline: int) -> float:
    """Price of running every instance the pool could launch for the whole deadline."""
    return sum(vt.price * vt.max_instances for vt in pool) * deadline / SECONDS_PER_HOUR


def solution_cost(sol: ScheduleSolution) -> float:
    vms = sol.vm_map()
    return sum(
        vms[vid].vtype.price * z / SECONDS_PER_HOUR for vid, z in sol.per_vm_end.items()
    )


def fitness(sol: ScheduleSolution, job: JobSpec, env: EnvSpec, d_spot: int) -> float:
    vms = sol.vm_map()
    for vid, z in sol.per_vm_end.items():
        if vms[vid].market is Market.SPOT and z > d_spot:
            return math.inf
    return combine_objectives(solution_cost(sol), sol.makespan, sol.cost_ub, job.deadline, env.alpha)


def combine_objectives(cost: float, makespan: float, cost_ub: float, deadline: int, alpha: float) -> float:
    cost_norm = cost / cost_ub if cost_ub > 0 else 0.0
    return alpha * cost_norm + (1 - alpha) * makespan / deadline


def wrr_weight(vt: VmTypeSpec) -> float:
    if vt.price == 0:
        raise UndefinedWeightError(f"{vt.id}: weight undefined for a zero price")
    return vt.gflops / vt.price
