"""Discrete-event execution of a static map under spot hibernations.

Time is integer seconds. Events are ordered by ``(at, seq)`` where ``seq`` is
the push order, so a run is a pure function of its inputs and RNG seed.
Task progress is tracked as a completed fraction of the task's work; work
scales with the instance's speed and, on burstables, with the CPU mode.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field

from botsched import dynamic
from botsched.errors import SimulationIntegrityError
from botsched.events import EventKind, SimEvent
from botsched.model import (
    SECONDS_PER_HOUR,
    EnvSpec,
    JobSpec,
    Market,
    Mode,
    ScheduleSolution,
    TaskSpec,
    VmInstance,
    VmState,
    VmTypeSpec,
)

EPS = 1e-9
POLICIES = ("burst-hads", "hads-baseline", "static")


def checkpoint_points(task: TaskSpec, env: EnvSpec) -> tuple[float, ...]:
    """Work fractions at which the task checkpoints. The count is fixed from
    the fastest catalog time so total overhead stays within budget anywhere."""
    fastest = min(task.exec_time.values())
    n = int(env.ckpt_overhead_budget * fastest // env.ckpt_unit_cost)
    return tuple(k / (n + 1) for k in range(1, n + 1))


@dataclass
class TaskRun:
    task: TaskSpec
    ckpt_points: tuple[float, ...] = ()
    instance: str | None = None
    vcpu: int | None = None
    mode: Mode = Mode.BURST
    work: int = 0  # full-speed seconds on the current instance
    frac: float = 0.0  # completed fraction at seg_start
    ckpt_frac: float = 0.0
    ckpt_count: int = 0
    running: bool = False
    seg_start: float = 0.0
    seg_end: float = 0.0  # exact time the segment reaches ``target``
    target: float = 0.0
    rate: float = 1.0
    token: int = 0
    reserved: float = 0.0
    started_at: int | None = None
    finished_at: int | None = None
    migrations: int = 0

    @property
    def id(self) -> int:
        return self.task.id

    @property
    def progress(self) -> float:
        return self.frac * self.work

    @property
    def last_ckpt(self) -> float:
        return self.ckpt_frac * self.work

    def frac_at(self, t: float) -> float:
        if not self.running or t <= self.seg_start:
            return self.frac
        done = self.frac + (min(t, self.seg_end) - self.seg_start) * self.rate / self.work
        return min(done, self.target)

    def ckpts_after(self, f: float) -> int:
        return sum(1 for p in self.ckpt_points if p > f + EPS)


class SimVm:
    """Runtime state of one instance. Static fields live on ``inst``."""

    def __init__(self, inst: VmInstance, boot_done: int, origin: str):
        self.inst = inst
        self.boot_done = boot_done
        self.origin = origin
        self.running: list[TaskRun | None] = [None] * inst.vtype.vcpus
        self.pending: list[list[TaskRun]] = [[] for _ in range(inst.vtype.vcpus)]
        self.terminated_at: int | None = None
        self.last_settle = inst.launched_at
        self.accrued = 0.0
        self.consumed = 0.0
        self.cc0 = inst.cc if inst.vtype.burstable else 0.0

    @property
    def id(self) -> str:
        return self.inst.id

    @property
    def vtype(self) -> VmTypeSpec:
        return self.inst.vtype

    @property
    def state(self) -> VmState:
        return self.inst.state

    @property
    def market(self) -> Market:
        return self.inst.vtype.market

    def runs(self) -> list[TaskRun]:
        out = [r for r in self.running if r is not None]
        for q in self.pending:
            out.extend(q)
        return out

    def has_work(self) -> bool:
        return any(r is not None for r in self.running) or any(self.pending)

    def sync_queues(self) -> None:
        self.inst.queues = [
            ([(r.id, r.mode)] if r is not None else []) + [(p.id, p.mode) for p in q]
            for r, q in zip(self.running, self.pending)
        ]


@dataclass
class SimResult:
    policy: str
    deadline: int
    vms: list[SimVm]
    runs: dict[int, TaskRun]
    trace: list[dict]
    end_time: int
    makespan: int
    deadline_met: bool
    unfinished: list[int]
    hibernations: int
    resumes: int
    ondemand_launched: int
    deadline_risks: list[dict] = field(default_factory=list)


class World:
    def __init__(
        self,
        job: JobSpec,
        catalog: list[VmTypeSpec],
        env: EnvSpec,
        solution: ScheduleSolution,
        policy: str = "burst-hads",
        events: list[SimEvent] = (),
        seed: int = 0,
        check: bool = False,
        horizon_factor: int = 10,
    ):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        self.job = job
        self.catalog = list(catalog)
        self.env = env
        self.policy = policy
        self.deadline = job.deadline
        self.d_spot = solution.d_spot
        self.rng = random.Random(seed)
        self.check = check
        self.horizon = horizon_factor * job.deadline
        self.now = 0
        self.heap: list[SimEvent] = []
        self.seq = 0
        self.vms: dict[str, SimVm] = {}
        self.type_count: dict[str, int] = {}
        self.trace: list[dict] = []
        self.risks: list[dict] = []
        self.hibernations = 0
        self.resumes = 0
        self.ondemand_launched = 0
        self.ended = False

        tasks = job.by_id()
        self.runs = {t.id: TaskRun(t, checkpoint_points(t, env)) for t in job.tasks}
        self.unfinished = set(self.runs)
        missing = set(tasks) - set(solution.allocation)
        if missing:
            raise SimulationIntegrityError(f"map leaves tasks {sorted(missing)} unallocated")

        for inst in solution.selected_vms:
            vm = self.launch(inst.vtype, origin="map", instance_id=inst.id)
            for k, q in enumerate(inst.queues):
                for tid, mode in q:
                    run = self.runs[tid]
                    self.assign(run, vm, k, mode)
        for ev in events:
            self.push(ev.at, ev.kind, instance=ev.instance, task=ev.task,
                      vm_type=ev.vm_type, resume_delay=ev.resume_delay)
        for vm in list(self.vms.values()):
            self.try_start(vm)
            if not vm.has_work():
                self.record("vm_idle", vm.id)

    # -- infrastructure ------------------------------------------------------

    def push(self, at: int, kind: EventKind, **kw) -> SimEvent:
        ev = SimEvent(at=int(at), seq=self.seq, kind=kind, **kw)
        self.seq += 1
        heapq.heappush(self.heap, ev)
        return ev

    def record(self, event: str, instance: str | None = None, task: int | None = None, **detail) -> None:
        row = {"t": self.now, "event": event}
        if instance is not None:
            row["instance"] = instance
        if task is not None:
            row["task"] = task
        for k, v in detail.items():
            row[k] = round(v, 6) if isinstance(v, float) else v
        self.trace.append(row)

    def launch(self, vtype: VmTypeSpec, origin: str, instance_id: str | None = None) -> SimVm:
        n = self.type_count.get(vtype.id, 0)
        if instance_id is None:
            k = n
            while f"{vtype.id}#{k}" in self.vms:
                k += 1
            instance_id = f"{vtype.id}#{k}"
        self.type_count[vtype.id] = n + 1
        inst = VmInstance(instance_id, vtype, state=VmState.IDLE, launched_at=self.now, ac_len=self.env.ac_len)
        vm = SimVm(inst, self.now + self.env.startup_overhead, origin)
        self.vms[instance_id] = vm
        if origin != "map" and vtype.market is Market.ON_DEMAND:
            self.ondemand_launched += 1
        self.record("launch", instance_id, vm_type=vtype.id, origin=origin)
        self.push(self.now + self.env.ac_len, EventKind.AC_BOUNDARY, instance=instance_id)
        return vm

    def quota_left(self, vtype: VmTypeSpec) -> int:
        return vtype.max_instances - self.type_count.get(vtype.id, 0)

    def duration(self, run: TaskRun, vtype: VmTypeSpec) -> int:
        return run.task.exec_time[vtype.id]

    # -- credits -------------------------------------------------------------

    def settle(self, vm: SimVm) -> None:
        """Bring the credit balance of a burstable up to ``now``."""
        a, b = vm.last_settle, self.now
        vm.last_settle = b
        vt = vm.vtype
        if not vt.burstable or b <= a or vm.state in (VmState.HIBERNATED, VmState.TERMINATED):
            return
        spans = []
        for run in vm.running:
            if run is None or not run.running or run.mode is not Mode.BURST:
                continue
            s, e = max(a, run.seg_start), min(b, run.seg_end)
            if e <= s:
                continue
            spans.append((s, e))
            used = (e - s) / vt.burst_period
            vm.inst.cc -= used
            vm.consumed += used
            take = min(used, run.reserved)
            run.reserved -= take
            vm.inst.reserved_credits -= take
        covered = 0.0
        cur_s = cur_e = None
        for s, e in sorted(spans):
            if cur_e is None or s > cur_e:
                if cur_e is not None:
                    covered += cur_e - cur_s
                cur_s, cur_e = s, e
            else:
                cur_e = max(cur_e, e)
        if cur_e is not None:
            covered += cur_e - cur_s
        gained = vt.credit_accrual * ((b - a) - covered) / SECONDS_PER_HOUR
        vm.inst.cc += gained
        vm.accrued += gained

    def release(self, vm: SimVm, run: TaskRun) -> None:
        vm.inst.reserved_credits -= run.reserved
        run.reserved = 0.0

    # -- task placement ------------------------------------------------------

    def assign(self, run: TaskRun, vm: SimVm, vcpu: int, mode: Mode, reserve: float = 0.0) -> None:
        """Queue ``run`` on ``vm``; it restarts from its last checkpoint."""
        run.instance = vm.id
        run.vcpu = vcpu
        run.mode = mode
        run.work = self.duration(run, vm.vtype)
        run.frac = run.ckpt_frac
        run.running = False
        run.token += 1
        run.reserved = reserve
        vm.inst.reserved_credits += reserve
        vm.pending[vcpu].append(run)
        if vm.state is VmState.IDLE:
            vm.inst.state = VmState.BUSY
        vm.sync_queues()

    def detach(self, vm: SimVm, run: TaskRun) -> None:
        """Take ``run`` off ``vm`` (running slot or queue)."""
        self.settle(vm)
        for k, r in enumerate(vm.running):
            if r is run:
                vm.running[k] = None
        for q in vm.pending:
            if run in q:
                q.remove(run)
        self.release(vm, run)
        run.running = False
        run.token += 1
        vm.sync_queues()

    def memory_in_use(self, vm: SimVm) -> float:
        return sum(r.task.rm for r in vm.running if r is not None)

    def try_start(self, vm: SimVm) -> None:
        if vm.state in (VmState.HIBERNATED, VmState.TERMINATED):
            return
        for k in range(vm.vtype.vcpus):
            if vm.running[k] is not None or not vm.pending[k]:
                continue
            run = vm.pending[k][0]
            if self.memory_in_use(vm) + run.task.rm > vm.vtype.memory_mb + EPS:
                continue  # waits for memory to free up
            vm.pending[k].pop(0)
            vm.running[k] = run
            self.begin(vm, run, max(self.now, vm.boot_done))
        if vm.has_work():
            vm.inst.state = VmState.BUSY
        vm.sync_queues()

    def begin(self, vm: SimVm, run: TaskRun, at: float) -> None:
        self.settle(vm)
        if run.started_at is None:
            run.started_at = int(at)
        if vm.vtype.burstable and run.mode is Mode.BURST:
            need = (1 - run.frac) * run.work / vm.vtype.burst_period
            if vm.inst.cc + EPS < need:
                run.mode = Mode.BASELINE
                self.release(vm, run)
                self.record("demote", vm.id, run.id, cc=vm.inst.cc, need=need)
        run.running = True
        run.seg_start = float(at)
        self.schedule(vm, run)
        self.record("start", vm.id, run.id, vcpu=run.vcpu, mode=run.mode.value, at=int(at), progress=run.frac)

    def rate(self, vtype: VmTypeSpec, mode: Mode) -> float:
        return vtype.baseline_fraction if mode is Mode.BASELINE else 1.0

    def schedule(self, vm: SimVm, run: TaskRun) -> None:
        run.token += 1
        run.rate = self.rate(vm.vtype, run.mode)
        nxt = next((p for p in run.ckpt_points if p > run.frac + EPS), None)
        run.target = nxt if nxt is not None else 1.0
        run.seg_end = run.seg_start + (run.target - run.frac) * run.work / run.rate
        kind = EventKind.CHECKPOINT if nxt is not None else EventKind.TASK_FINISH
        self.push(math.ceil(run.seg_end - EPS), kind, instance=vm.id, task=run.id, token=run.token)

    # -- projections (used by the dynamic scheduler) ---------------------------

    def wall(self, run: TaskRun, vtype: VmTypeSpec, mode: Mode, from_frac: float | None = None) -> float:
        f = run.ckpt_frac if from_frac is None else from_frac
        work = self.duration(run, vtype)
        return (1 - f) * work / self.rate(vtype, mode) + run.ckpts_after(f) * self.env.ckpt_unit_cost

    def projection(self, vm: SimVm) -> tuple[list[float], dict[int, tuple[float, float]]]:
        """Projected end of every vCPU and (start, finish) of every task on ``vm``."""
        ends, spans = [], {}
        base = max(self.now, vm.boot_done)
        for r, q in zip(vm.running, vm.pending):
            t = base
            if r is not None:
                s = max(self.now, r.seg_start) if r.running else base
                cur = r.frac_at(self.now)
                t = s + self.wall(r, vm.vtype, r.mode, cur)
                spans[r.id] = (self.now, t)
            for p in q:
                spans[p.id] = (t, t + self.wall(p, vm.vtype, p.mode))
                t = spans[p.id][1]
            ends.append(t)
        return ends, spans

    # -- lifecycle -----------------------------------------------------------

    def hibernate(self, vm: SimVm, resume_delay: float | None) -> list[TaskRun]:
        self.settle(vm)
        frozen = []
        for r in vm.running:
            if r is not None:
                r.frac = r.frac_at(self.now)
                r.running = False
                r.token += 1
                frozen.append(r)
        vm.inst.state = VmState.HIBERNATED
        vm.inst.hibernation_intervals.append((self.now, None))
        self.hibernations += 1
        self.record("hibernate", vm.id, frozen=[r.id for r in frozen], queued=sum(len(q) for q in vm.pending))
        if resume_delay is not None:
            self.push(self.now + max(1, math.ceil(resume_delay)), EventKind.RESUME, instance=vm.id)
        return vm.runs()

    def become_idle(self, vm: SimVm) -> None:
        vm.inst.state = VmState.IDLE
        self.push(self.now, EventKind.VM_IDLE, instance=vm.id)

    def terminate(self, vm: SimVm, reason: str) -> None:
        if vm.state is VmState.TERMINATED:
            return
        self.settle(vm)
        if vm.state is VmState.HIBERNATED:
            start, _ = vm.inst.hibernation_intervals[-1]
            vm.inst.hibernation_intervals[-1] = (start, self.now)
        vm.inst.state = VmState.TERMINATED
        vm.terminated_at = self.now
        self.record("terminate", vm.id, reason=reason)

    def flag_risk(self, run: TaskRun, reason: str) -> None:
        self.risks.append({"t": self.now, "task": run.id, "reason": reason})
        self.record("deadline_risk", run.instance, run.id, reason=reason)

    # -- event loop ----------------------------------------------------------

    def step(self) -> bool:
        """Apply the next event. Returns False once the simulation is over."""
        if self.ended or not self.heap:
            if not self.ended:
                self.finish("no-events")
            return False
        ev = heapq.heappop(self.heap)
        if ev.at < self.now:
            raise SimulationIntegrityError(f"event at {ev.at} precedes clock {self.now}")
        if ev.at > self.horizon:
            self.finish("horizon")
            return False
        self.now = ev.at
        getattr(self, "_on_" + ev.kind.value)(ev)
        if self.check:
            self.audit()
        return not self.ended

    def run(self) -> SimResult:
        while self.step():
            pass
        return self.result()

    def _live_run(self, ev: SimEvent) -> tuple[SimVm, TaskRun] | None:
        run = self.runs[ev.task]
        if run.token != ev.token or run.instance != ev.instance or not run.running:
            return None
        return self.vms[ev.instance], run

    def _on_task_finish(self, ev: SimEvent) -> None:
        hit = self._live_run(ev)
        if hit is None:
            return
        vm, run = hit
        self.settle(vm)
        run.frac = run.ckpt_frac = 1.0
        run.running = False
        run.finished_at = self.now
        self.release(vm, run)
        vm.running[run.vcpu] = None
        self.unfinished.discard(run.id)
        self.record("task_finish", vm.id, run.id, mode=run.mode.value)
        self.try_start(vm)
        if not vm.has_work():
            self.become_idle(vm)
        if not self.unfinished:
            self.push(self.now, EventKind.SIM_END)

    def _on_checkpoint(self, ev: SimEvent) -> None:
        hit = self._live_run(ev)
        if hit is None:
            return
        vm, run = hit
        self.settle(vm)
        run.frac = run.ckpt_frac = run.target
        run.ckpt_count += 1
        # chain from the exact segment end so event rounding never accumulates
        run.seg_start = run.seg_end + self.env.ckpt_unit_cost
        self.schedule(vm, run)
        self.record("checkpoint", vm.id, run.id, progress=run.frac)

    def _on_vm_idle(self, ev: SimEvent) -> None:
        vm = self.vms[ev.instance]
        if vm.state is VmState.IDLE:
            self.record("vm_idle", vm.id)

    def _on_ac_boundary(self, ev: SimEvent) -> None:
        vm = self.vms[ev.instance]
        if vm.state is VmState.TERMINATED:
            return
        self.push(self.now + self.env.ac_len, EventKind.AC_BOUNDARY, instance=vm.id)
        if vm.state is not VmState.IDLE:
            return
        if self.policy != "static":
            dynamic.work_stealing(self, vm)
        if vm.state is VmState.IDLE and dynamic.termination_policy(vm, self.now) == "terminate":
            self.terminate(vm, "idle at AC boundary")

    def _on_hibernate(self, ev: SimEvent) -> None:
        pool = sorted(
            (vm for vm in self.vms.values()
             if vm.vtype.id == ev.vm_type and vm.state in (VmState.BUSY, VmState.IDLE)),
            key=lambda vm: vm.id,
        )
        if not pool:
            self.record("hibernate_skipped", vm_type=ev.vm_type)
            return
        vm = self.rng.choice(pool)
        affected = self.hibernate(vm, ev.resume_delay)
        if not affected:
            return
        if self.policy == "burst-hads":
            dynamic.burst_migration(self, vm, affected)
        elif self.policy == "hads-baseline":
            # every frozen VM competes for the same on-demand quota, so the
            # due time covers all of them and is re-armed for each
            waiting = [v for v in self.vms.values() if v.state is VmState.HIBERNATED and v.has_work()]
            due = dynamic.hads_migration_time(self, [r for v in waiting for r in v.runs()])
            for v in waiting:
                self.push(due, EventKind.MIGRATION_DUE, instance=v.id)

    def _on_resume(self, ev: SimEvent) -> None:
        vm = self.vms[ev.instance]
        if vm.state is VmState.TERMINATED:
            raise SimulationIntegrityError(f"resume of terminated instance {vm.id}")
        if vm.state is not VmState.HIBERNATED:
            self.record("resume_discarded", vm.id)
            return
        start, _ = vm.inst.hibernation_intervals[-1]
        vm.inst.hibernation_intervals[-1] = (start, self.now)
        vm.last_settle = self.now
        self.resumes += 1
        self.record("resume", vm.id)
        if vm.has_work():
            vm.inst.state = VmState.BUSY
            for r in vm.running:
                if r is not None:
                    r.running = True
                    r.seg_start = float(self.now)
                    self.schedule(vm, r)
            self.try_start(vm)
            if self.policy == "hads-baseline":
                dynamic.offload_late(self, vm)
        else:
            vm.inst.state = VmState.IDLE
            if self.policy != "static":
                dynamic.work_stealing(self, vm)

    def _on_migration_due(self, ev: SimEvent) -> None:
        vm = self.vms[ev.instance]
        if vm.state is not VmState.HIBERNATED or not vm.has_work():
            return
        waiting = [v for v in self.vms.values() if v.state is VmState.HIBERNATED and v.has_work()]
        dynamic.hads_migration(self, [r for v in waiting for r in v.runs()])

    def _on_sim_end(self, ev: SimEvent) -> None:
        self.finish("all tasks finished")

    def finish(self, reason: str) -> None:
        for vm in self.vms.values():
            self.terminate(vm, "job end")
        self.ended = True
        self.record("sim_end", reason=reason)

    # -- checks & results ------------------------------------------------------

    def audit(self) -> None:
        seen: dict[int, str] = {}
        for vm in self.vms.values():
            for r in vm.runs():
                if r.id in seen:
                    raise SimulationIntegrityError(f"task {r.id} on {seen[r.id]} and {vm.id}")
                seen[r.id] = vm.id
                if r.instance != vm.id:
                    raise SimulationIntegrityError(f"task {r.id} thinks it is on {r.instance}, found on {vm.id}")
            active = [r for r in vm.running if r is not None and r.running]
            if active and vm.state in (VmState.HIBERNATED, VmState.TERMINATED):
                raise SimulationIntegrityError(f"task running on {vm.state.value} instance {vm.id}")
            if self.memory_in_use(vm) > vm.vtype.memory_mb + EPS:
                raise SimulationIntegrityError(f"memory exceeded on {vm.id}")
            if vm.vtype.burstable and vm.inst.cc < -1e-6:
                raise SimulationIntegrityError(f"negative credits on {vm.id}")
        if not self.ended and set(seen) != self.unfinished:
            lost = sorted(self.unfinished - set(seen))
            raise SimulationIntegrityError(f"unfinished tasks not on any instance: {lost}")

    def result(self) -> SimResult:
        finished = [r.finished_at for r in self.runs.values() if r.finished_at is not None]
        makespan = max(finished, default=0)
        unfinished = sorted(self.unfinished)
        return SimResult(
            policy=self.policy,
            deadline=self.deadline,
            vms=list(self.vms.values()),
            runs=self.runs,
            trace=self.trace,
            end_time=self.now,
            makespan=makespan,
            deadline_met=not unfinished and makespan <= self.deadline,
            unfinished=unfinished,
            hibernations=self.hibernations,
            resumes=self.resumes,
            ondemand_launched=self.ondemand_launched,
            deadline_risks=list(self.risks),
        )


def simulate(
    job: JobSpec,
    catalog: list[VmTypeSpec],
    env: EnvSpec,
    solution: ScheduleSolution,
    policy: str = "burst-hads",
    events: list[SimEvent] = (),
    seed: int = 0,
    check: bool = False,
) -> SimResult:
    return World(job, catalog, env, solution, policy, events, seed, check).run()
