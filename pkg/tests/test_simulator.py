import pytest

from botsched.errors import SimulationIntegrityError
from botsched.events import EventKind, SimEvent
from botsched.model import EnvSpec, Mode, TaskSpec, VmState
from botsched.simulator import TaskRun, checkpoint_points, simulate
from simkit import BURST, OD, SPOT, job_of, make_map, tasks, world


def hib(at, vm_type=SPOT.id, delay=None, seq=0):
    return SimEvent(at=at, seq=seq, kind=EventKind.HIBERNATE, vm_type=vm_type, resume_delay=delay)


def kinds(w, event):
    return [row for row in w.trace if row["event"] == event]


def test_checkpoint_points():
    t = tasks(1, e=300)[0]
    pts = checkpoint_points(t, EnvSpec())
    assert len(pts) == 6 and pts[0] == pytest.approx(1 / 7)
    assert checkpoint_points(t, EnvSpec(ckpt_overhead_budget=0.0)) == ()


def test_plain_run_pays_checkpoint_overhead():
    job = job_of(tasks(1))
    w = world({"s.spot#0": [[0]]}, job)
    res = w.run()
    assert res.makespan == 60 + 300 + 6 * 5
    assert res.deadline_met and len(kinds(w, "checkpoint")) == 6


def test_freeze_and_resume_in_place():
    job = job_of(tasks(1))
    w = world({"s.spot#0": [[0]]}, job, policy="static", events=[hib(220, delay=100)])
    res = w.run()
    assert res.makespan == 390 + 100
    vm = w.vms["s.spot#0"]
    assert vm.inst.hibernation_intervals == [(220, 320)]
    assert res.hibernations == 1 and res.resumes == 1


def test_hibernation_hands_all_tasks_to_migration():
    job = job_of(tasks(2))
    w = world({"s.spot#0": [[0], [1]]}, job, events=[hib(100)])
    res = w.run()
    frozen = kinds(w, "hibernate")[0]["frozen"]
    assert frozen == [0, 1]
    moved = {row["task"] for row in w.trace if row["event"].startswith("migrate_")}
    assert moved == {0, 1}
    assert res.deadline_met and res.ondemand_launched == 1


def test_idle_regular_terminates_at_ac_burstable_kept():
    job = job_of(tasks(1, e=1500))
    w = world({"s.spot#0": [[0]], "r.spot#0": [], "b.burst#0": []}, job)
    res = w.run()
    term = {row["instance"]: row for row in kinds(w, "terminate")}
    assert term["r.spot#0"]["t"] == 900 and term["r.spot#0"]["reason"] == "idle at AC boundary"
    assert term["b.burst#0"]["reason"] == "job end"
    assert w.vms["b.burst#0"].terminated_at == res.end_time


def test_credit_accrual_idle_hour():
    job = job_of(tasks(1, e=100))
    w = world({"s.spot#0": [[0]], "b.burst#0": []}, job)
    b = w.vms["b.burst#0"]
    w.now = 3600
    w.settle(b)
    assert b.inst.cc == pytest.approx(10 + 24)


def test_baseline_task_consumes_no_credits():
    job = job_of(tasks(1, e=100))
    w = world({"b.burst#0": [[(0, Mode.BASELINE)]]}, job)
    res = w.run()
    b = w.vms["b.burst#0"]
    assert b.consumed == 0 and b.accrued > 0
    assert res.makespan == 60 + 500 + 2 * 5


def test_burst_task_without_credits_is_demoted():
    job = job_of(tasks(1, e=900))
    w = world({"b.burst#0": [[0]]}, job)
    res = w.run()
    assert kinds(w, "demote") and res.runs[0].mode is Mode.BASELINE


def test_remaining_time_from_checkpoint():
    job = job_of(tasks(1, e=300))
    w = world({"s.spot#0": [[0]]}, job, env=EnvSpec(ckpt_overhead_budget=0.0))
    run = w.runs[0]
    assert w.wall(run, SPOT, Mode.BURST) == 300
    run.ckpt_frac = 0.5
    assert w.wall(run, SPOT, Mode.BURST) == 150
    # 100 s done of 300 on the source, 600 s on the slower target
    moved = TaskRun(TaskSpec(0, 1.0, {SPOT.id: 300, OD.id: 600}))
    moved.ckpt_frac = 100 / 300
    assert w.wall(moved, OD, Mode.BURST) == pytest.approx(400)


def test_resume_of_terminated_instance_is_an_integrity_error():
    job = job_of(tasks(1))
    w = world({"s.spot#0": [[0]], "r.spot#0": []}, job)
    w.terminate(w.vms["r.spot#0"], "test")
    w.push(5, EventKind.RESUME, instance="r.spot#0")
    with pytest.raises(SimulationIntegrityError):
        while w.step():
            pass


def test_map_must_cover_job():
    job = job_of(tasks(2))
    sol = make_map({"s.spot#0": [[0]]}, job)
    with pytest.raises(SimulationIntegrityError):
        simulate(job, [SPOT, OD], EnvSpec(), sol)
    with pytest.raises(ValueError):
        simulate(job, [SPOT, OD], EnvSpec(), make_map({"s.spot#0": [[0], [1]]}, job), policy="nope")


def test_memory_wait():
    job = job_of(tasks(2, e=100, rm=3000.0))
    w = world({"s.spot#0": [[0], [1]]}, job)
    res = w.run()
    starts = {row["task"]: row["at"] for row in kinds(w, "start")}
    assert starts[0] == 60 and starts[1] >= 160
    assert res.deadline_met


def test_same_seed_same_trace():
    job = job_of(tasks(4))
    layout = {"s.spot#0": [[0, 1], [2, 3]], "r.spot#0": [], "b.burst#0": []}
    evs = [hib(150, delay=300), hib(400, seq=1)]
    a = world(layout, job, events=evs, seed=3).run()
    b = world(layout, job, events=evs, seed=3).run()
    assert a.trace == b.trace and a.makespan == b.makespan


def test_hibernation_with_no_live_instance_is_skipped():
    job = job_of(tasks(1))
    w = world({"s.spot#0": [[0]]}, job, events=[hib(100, vm_type="r.spot")])
    w.run()
    assert kinds(w, "hibernate_skipped") and w.hibernations == 0


def test_credit_identity_after_mixed_run():
    job = job_of(tasks(3, e=200))
    layout = {"s.spot#0": [[0], [1]], "b.burst#0": [[(2, Mode.BASELINE)]]}
    w = world(layout, job, events=[hib(90)])
    w.run()
    b = w.vms["b.burst#0"]
    assert b.inst.cc == pytest.approx(b.cc0 + b.accrued - b.consumed)
    assert b.state is VmState.TERMINATED
