"""Reactions to spot hibernations: burst-aware migration, the plain
on-demand migration of the baseline policy, work stealing and the idle
termination rule. All functions act on a running ``World``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

from botsched.model import Market, Mode, VmState

if TYPE_CHECKING:  # pragma: no cover
    from botsched.simulator import SimVm, TaskRun, World

EPS = 1e-9


@dataclass(frozen=True)
class Slot:
    vcpu: int
    start: float
    finish: float


def credits_needed(run: TaskRun, vm: SimVm) -> int:
    """Credits reserved to run the whole task in burst mode (rcc)."""
    return math.ceil(run.task.exec_time[vm.vtype.id] / vm.vtype.burst_period - EPS)


def check_migration(world: World, run: TaskRun, vm: SimVm, mode: Mode = Mode.BURST) -> Slot | None:
    """Where ``run`` would go on ``vm`` now, or None if it would break memory,
    the deadline or (for spot targets) the slack needed to rescue its tasks."""
    if vm.state in (VmState.HIBERNATED, VmState.TERMINATED) or vm is world.vms.get(run.instance):
        return None
    if run.task.rm > vm.vtype.memory_mb + EPS:
        return None
    ends, spans = world.projection(vm)
    k = min(range(len(ends)), key=lambda i: (ends[i], i))
    start = ends[k]
    finish = start + world.wall(run, vm.vtype, mode)
    if finish > world.deadline + EPS:
        return None
    # memory: peak over the projected intervals, candidate included
    intervals = [(s, e, world.runs[tid].task.rm) for tid, (s, e) in spans.items()]
    intervals.append((start, finish, run.task.rm))
    for s0, _, _ in intervals:
        used = sum(rm for s, e, rm in intervals if s <= s0 < e)
        if used > vm.vtype.memory_mb + EPS:
            return None
    if vm.market is Market.SPOT:
        new_end = max(max(ends), finish)
        longest = max(
            [world.duration(world.runs[tid], vm.vtype) for tid in spans] + [world.duration(run, vm.vtype)]
        )
        if world.deadline - new_end <= longest:
            return None
    return Slot(k, start, finish)


def _move(world: World, run: TaskRun, vm: SimVm, slot: Slot, mode: Mode, how: str, reserve: float = 0.0) -> None:
    source = world.vms.get(run.instance)
    if source is not None:
        world.detach(source, run)
    world.assign(run, vm, slot.vcpu, mode, reserve)
    run.migrations += 1
    world.record(
        how, vm.id, run.id,
        source=source.id if source else None, mode=mode.value, finish=slot.finish,
    )
    world.try_start(vm)


def _by_projected_end(world: World, vms: list[SimVm]) -> list[SimVm]:
    def key(vm):
        ends, _ = world.projection(vm)
        return (vm.market is not Market.SPOT, max(ends), vm.id)
    return sorted(vms, key=key)


def _try_burstable(world: World, run: TaskRun) -> bool:
    for vm in sorted(world.vms.values(), key=lambda v: v.id):
        if not vm.vtype.burstable or vm.state is not VmState.IDLE:
            continue
        world.settle(vm)
        rcc = credits_needed(run, vm)
        if vm.inst.cc - vm.inst.reserved_credits <= rcc:
            continue
        slot = check_migration(world, run, vm, Mode.BURST)
        if slot is not None:
            _move(world, run, vm, slot, Mode.BURST, "migrate_burst", reserve=float(rcc))
            return True
    return False


def _try_existing(world: World, run: TaskRun, state: VmState, how: str) -> bool:
    pool = [
        vm for vm in world.vms.values()
        if not vm.vtype.burstable and vm.state is state
    ]
    for vm in _by_projected_end(world, pool):
        slot = check_migration(world, run, vm)
        if slot is not None:
            _move(world, run, vm, slot, Mode.BURST, how)
            return True
    return False


def _ondemand_types(world: World):
    return sorted(
        (vt for vt in world.catalog if vt.market is Market.ON_DEMAND and world.quota_left(vt) > 0),
        key=lambda vt: (vt.price, vt.id),
    )


def _try_new_ondemand(world: World, run: TaskRun) -> bool:
    omega = world.env.startup_overhead
    for vt in _ondemand_types(world):
        if run.task.rm > vt.memory_mb + EPS:
            continue
        if world.now + omega + world.wall(run, vt, Mode.BURST) < world.deadline:
            vm = world.launch(vt, origin="migration")
            slot = Slot(0, vm.boot_done, vm.boot_done + world.wall(run, vt, Mode.BURST))
            _move(world, run, vm, slot, Mode.BURST, "migrate_new")
            return True
    return False


def _fallback(world: World, run: TaskRun, source: SimVm) -> None:
    world.flag_risk(run, "no migration target meets the deadline")
    for vt in _ondemand_types(world):
        if run.task.rm <= vt.memory_mb + EPS:
            vm = world.launch(vt, origin="fallback")
            slot = Slot(0, vm.boot_done, vm.boot_done + world.wall(run, vt, Mode.BURST))
            _move(world, run, vm, slot, Mode.BURST, "migrate_late")
            return
    world.record("stay_frozen", source.id, run.id)


def _order(runs: list[TaskRun]) -> list[TaskRun]:
    # checkpointed work first (it loses least by moving), then by id
    return sorted(runs, key=lambda r: (r.ckpt_frac <= 0, -r.ckpt_frac, r.id))


def burst_migration(world: World, source: SimVm, runs: list[TaskRun]) -> None:
    """Rehome every task of a hibernated VM: idle burstable in burst mode,
    then idle, then busy regular VMs, then a fresh on-demand VM."""
    for run in _order(runs):
        if (
            _try_burstable(world, run)
            or _try_existing(world, run, VmState.IDLE, "migrate_idle")
            or _try_existing(world, run, VmState.BUSY, "migrate_busy")
            or _try_new_ondemand(world, run)
        ):
            continue
        _fallback(world, run, source)


def hads_migration_time(world: World, runs: list[TaskRun]) -> int:
    """Latest time at which fresh on-demand VMs can still absorb ``runs``:
    they are packed longest-first onto the vCPUs of the remaining on-demand
    quota (each slot at its own type's speed) and the packed length plus
    boot is taken off the deadline."""
    types = _ondemand_types(world)
    slots = [[vt, 0.0] for vt in types for _ in range(world.quota_left(vt) * vt.vcpus)]
    if not slots or not runs:
        return world.now
    ref = types[0]
    packed = 0.0
    for run in sorted(runs, key=lambda r: (-world.wall(r, ref, Mode.BURST), r.id)):
        slot = min(slots, key=lambda sl: sl[1] + world.wall(run, sl[0], Mode.BURST))
        slot[1] += world.wall(run, slot[0], Mode.BURST)
        packed = max(packed, slot[1])
    return max(world.now, math.floor(world.deadline - world.env.startup_overhead - packed) - 1)


def hads_migration(world: World, runs: list[TaskRun]) -> None:
    """Migration without burstables: idle, busy, then new on-demand VMs.
    Longest remaining work goes first, the order the due time was packed in."""
    od = _ondemand_types(world) or [vt for vt in world.catalog if vt.market is Market.ON_DEMAND]
    ref = od[0] if od else None
    key = (lambda r: (-world.wall(r, ref, Mode.BURST), r.id)) if ref else (lambda r: r.id)
    for run in sorted(runs, key=key):
        if (
            _try_existing(world, run, VmState.IDLE, "migrate_idle")
            or _try_existing(world, run, VmState.BUSY, "migrate_busy")
            or _try_new_ondemand(world, run)
        ):
            continue
        _fallback(world, run, world.vms[run.instance])


def offload_late(world: World, vm: SimVm) -> None:
    """After an in-place resume, move queued tasks projected past D elsewhere."""
    _, spans = world.projection(vm)
    late = [r for q in vm.pending for r in q if spans[r.id][1] > world.deadline + EPS]
    if late:
        hads_migration(world, late)


def work_stealing(world: World, idle: SimVm) -> int:
    """Pull queued (not started) tasks from busy regular VMs onto ``idle``.

    A task moves only if it would finish earlier on ``idle`` than where it
    is queued. A burstable steals a single task, in baseline mode.
    """
    if idle.state is not VmState.IDLE:
        return 0
    mode = Mode.BASELINE if idle.vtype.burstable else Mode.BURST
    stolen = 0
    while True:
        sources = [
            vm for vm in world.vms.values()
            if vm is not idle and not vm.vtype.burstable and vm.state is VmState.BUSY and any(vm.pending)
        ]

        def source_key(vm):
            ends, _ = world.projection(vm)
            return (vm.market is Market.SPOT, -max(ends), vm.id)

        moved = False
        for src in sorted(sources, key=source_key):
            _, spans = world.projection(src)
            queued = [r for q in src.pending for r in q]
            queued.sort(key=lambda r: (-spans[r.id][1], r.id))
            for run in queued:
                slot = check_migration(world, run, idle, mode)
                if slot is None or slot.finish >= spans[run.id][1] - EPS:
                    continue
                _move(world, run, idle, slot, mode, "steal")
                stolen += 1
                moved = True
                break
            if moved:
                break
        if not moved or idle.vtype.burstable:
            return stolen


def termination_policy(vm: SimVm, at: int) -> str:
    """At an AC boundary: idle regular VMs go, burstables are kept to bank credits."""
    if vm.state is VmState.IDLE and not vm.vtype.burstable:
        return "terminate"
    return "keep"
