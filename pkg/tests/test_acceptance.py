"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import filecmp
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from botsched.config import SAMPLE_CATALOG, derive_seed, j60_job, load_config
from botsched.errors import ConstructionFailure, InfeasibleDeadlineError
from botsched.events import EventKind, ScenarioSpec, SimEvent, generate_events, poisson_arrivals
from botsched.experiment import run_experiment
from botsched.model import (
    EnvSpec,
    JobSpec,
    Market,
    Mode,
    Placement,
    ScheduleSolution,
    TaskSpec,
    VmInstance,
    VmTypeSpec,
    compute_d_spot,
    evaluate,
    fitness,
    validate_solution,
)
from botsched.oracle import brute_force_optimum
from botsched.simulator import simulate
from botsched.static import IlsParams, ils, initial_solution, primary_map
from toy import TOY_ENV, toy_instance

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "j60.yaml"
REPLICATIONS = 30


# -- 1 ----------------------------------------------------------------------------


def _as_solution(alloc, inst, d_spot, cost_ub):
    return ScheduleSolution(dict(alloc), list(inst.instances), d_spot, cost_ub)


def test_criterion_1_oracle_validator_cross_check(verdict):
    t0 = time.perf_counter()
    checked = optimum_bad = leaf_bad = raw_bad = leaves = 0
    rng = random.Random(1)
    for seed in range(200):
        job, catalog, inst = toy_instance(1000 + seed, horizon=(8, 10))
        try:
            d_spot = compute_d_spot(job, catalog, TOY_ENV)
        except InfeasibleDeadlineError:
            continue
        res = brute_force_optimum(inst, TOY_ENV, d_spot, keep_leaves=True, prune=False)
        checked += 1
        pool_ub = res.solution.cost_ub
        if math.isfinite(res.fitness):
            sol = evaluate(res.solution, job)
            if validate_solution(sol, job, TOY_ENV).violations:
                optimum_bad += 1
        for alloc, f in res.leaves:
            leaves += 1
            sol = evaluate(_as_solution(alloc, inst, d_spot, pool_ub), job)
            if validate_solution(sol, job, TOY_ENV).violations or fitness(sol, job, TOY_ENV, d_spot) < res.fitness - 1e-12:
                leaf_bad += 1
        # raw assignments drawn without the oracle's filter
        slots = [(vm.id, k) for vm in inst.instances for k in range(vm.vtype.vcpus)]
        starts = list(range(TOY_ENV.startup_overhead, d_spot + 1, 50))
        for _ in range(50):
            alloc = {}
            for t in job.tasks:
                vid, k = rng.choice(slots)
                alloc[t.id] = Placement(vid, k, rng.choice(starts))
            sol = evaluate(_as_solution(alloc, inst, d_spot, pool_ub), job)
            if not validate_solution(sol, job, TOY_ENV).violations:
                if fitness(sol, job, TOY_ENV, d_spot) < res.fitness - 1e-12:
                    raw_bad += 1
    elapsed = time.perf_counter() - t0
    ok = optimum_bad == 0 and leaf_bad == 0 and raw_bad == 0 and elapsed < 120
    verdict(1, ok, f"{checked} instances, {leaves} enumerated candidates; invalid optima {optimum_bad}, "
                   f"bad candidates {leaf_bad}, raw beats oracle {raw_bad}; {elapsed:.1f}s (<120s)")
    assert ok


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_ils_quality(verdict):
    t0 = time.perf_counter()
    runs = not_worse = within = no_start = 0
    seed = 0
    while runs < 50:
        seed += 1
        job, catalog, inst = toy_instance(seed)
        try:
            d_spot = compute_d_spot(job, catalog, TOY_ENV)
        except InfeasibleDeadlineError:
            continue
        _, opt = brute_force_optimum(inst, TOY_ENV, d_spot)
        if not math.isfinite(opt):
            continue
        spot = [vt for vt in catalog if vt.market is Market.SPOT]
        try:
            greedy = initial_solution(job, spot, d_spot, TOY_ENV)
        except ConstructionFailure:
            # no greedy start, so no ILS run to compare
            no_start += 1
            continue
        best = ils(job, catalog, IlsParams(seed=seed), TOY_ENV)
        f_greedy = fitness(greedy, job, TOY_ENV, d_spot)
        f_ils = fitness(best, job, TOY_ENV, d_spot)
        runs += 1
        not_worse += f_ils <= f_greedy + 1e-12
        within += f_ils <= 1.10 * opt + 1e-12
    elapsed = time.perf_counter() - t0
    ok = not_worse == runs and within >= 0.9 * runs and elapsed < 300
    verdict(2, ok, f"ILS <= greedy on {not_worse}/{runs}, within 10% of oracle on {within}/{runs} "
                   f"(need >= 90%); {no_start} oracle-feasible instances without a greedy start skipped; {elapsed:.1f}s (<300s)")
    assert ok


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_no_hibernation_completion(verdict):
    env = EnvSpec(startup_overhead=60, alpha=0.5, ac_len=900, ckpt_overhead_budget=0.10)
    fails = []
    spans = []
    for seed in range(10):
        job = j60_job(seed=60 + seed)
        params = IlsParams(200, 50, 0.10, 20, 0.25, 0.2, seed=seed)
        sol = primary_map(job, SAMPLE_CATALOG, params, env)
        d_spot = compute_d_spot(job, SAMPLE_CATALOG, env)
        res = simulate(job, SAMPLE_CATALOG, env, sol, "burst-hads", [], seed=seed, check=True)
        spans.append(res.makespan)
        if not res.deadline_met or res.makespan > d_spot:
            fails.append((seed, res.makespan, d_spot))
    ok = not fails
    verdict(3, ok, f"10 seeds, makespans {min(spans)}-{max(spans)}s vs D_spot; failures {fails}")
    assert ok


# -- 4, 5, 6, 8 share one batch -------------------------------------------------------


@pytest.fixture(scope="module")
def batch():
    cfg = load_config(CONFIG)
    cfg.replications = REPLICATIONS
    t0 = time.perf_counter()
    timings = {}
    result = run_experiment(cfg, strategies=["burst-hads"], trace=False, write=False)
    timings["burst-hads"] = time.perf_counter() - t0
    cfg5 = load_config(CONFIG)
    cfg5.replications = REPLICATIONS
    cfg5.scenarios = [s for s in cfg5.scenarios if s.id == "sc5"]
    t1 = time.perf_counter()
    hads = run_experiment(cfg5, strategies=["hads-baseline"], trace=False, write=False)
    timings["hads-sc5"] = time.perf_counter() - t1
    cfg1 = load_config(CONFIG)
    cfg1.replications = REPLICATIONS
    cfg1.scenarios = [s for s in cfg1.scenarios if s.id == "sc1"]
    t2 = time.perf_counter()
    od = run_experiment(cfg1, strategies=["ondemand-ils"], trace=False, write=False)
    timings["od-sc1"] = time.perf_counter() - t2
    assert not (result.errors or hads.errors or od.errors)
    return {"burst": result.reports, "hads": hads.reports, "od": od.reports, "timings": timings}


def test_criterion_4_deadline_robustness(batch, verdict):
    reports = batch["burst"]
    per = {}
    for r in reports:
        per.setdefault(r.scenario, []).append(r)
    clean = [r for r in reports if not r.deadline_risks]
    flagged = [r for r in reports if r.deadline_risks]
    clean_met = sum(r.deadline_met for r in clean)
    silent = [r for r in reports if not r.deadline_met and not r.deadline_risks]
    enough = all(len(v) >= 30 for v in per.values()) and len(per) == 5
    ok = enough and clean_met == len(clean) and not silent
    verdict(4, ok, f"{len(reports)} runs over {sorted(per)}; deadline met in {clean_met}/{len(clean)} runs "
                   f"with a feasible target at every hibernation; {len(flagged)} runs flagged at risk; "
                   f"{len(silent)} silent misses")
    assert ok


def test_criterion_5_makespan_vs_hads(batch, verdict):
    burst = [r.makespan for r in batch["burst"] if r.scenario == "sc5"]
    hads = [r.makespan for r in batch["hads"] if r.scenario == "sc5"]
    mb, mh = float(np.mean(burst)), float(np.mean(hads))
    reduction = 100 * (mh - mb) / mh
    runtime = batch["timings"]["hads-sc5"] + batch["timings"]["burst-hads"] / 5
    ok = len(burst) >= 30 and len(hads) >= 30 and reduction >= 20 and runtime < 600
    verdict(5, ok, f"sc5 mean makespan burst-hads {mb:.1f}s vs hads-baseline {mh:.1f}s: "
                   f"{reduction:.2f}% reduction (need >= 20%); ~{runtime:.0f}s (<600s)")
    assert ok


def test_criterion_6_cost_vs_ondemand(batch, verdict):
    burst = [r for r in batch["burst"] if r.scenario == "sc1"]
    od = batch["od"]
    cb, co = np.mean([r.total_cost for r in burst]), np.mean([r.total_cost for r in od])
    mb, mo = np.mean([r.makespan for r in burst]), np.mean([r.makespan for r in od])
    ok = cb <= 0.8 * co and mo < mb
    verdict(6, ok, f"sc1 mean cost burst-hads ${cb:.4f} vs ondemand-ils ${co:.4f} "
                   f"(ratio {cb / co:.3f}, need <= 0.8); makespan ondemand {mo:.1f}s < burst {mb:.1f}s")
    assert ok


# -- 7 ----------------------------------------------------------------------------


def test_criterion_7_poisson_generator(verdict):
    rng = np.random.default_rng(7)
    scen = ScenarioSpec("kh5", 5, 0)
    counts = []
    times = []
    for _ in range(10_000):
        evs = generate_events(scen, ["x.spot"], 2700, rng)
        counts.append(len(evs))
        times.extend(e.at for e in evs)
    mean = float(np.mean(counts))
    gaps = np.diff([0.0] + poisson_arrivals(5 / 2700, 2700 * 10_000, np.random.default_rng(8)))
    ks_gap = stats.kstest(gaps, "expon", args=(0, 2700 / 5))
    # given the count, arrival times of a homogeneous process are uniform on [0, D]
    ks_uniform = stats.kstest((np.asarray(times) - 0.5) / 2700, "uniform")
    ok = abs(mean - 5) <= 0.1 and ks_gap.pvalue > 0.01 and ks_uniform.pvalue > 0.01
    verdict(7, ok, f"mean count {mean:.4f} over 10000 trials (5 +/- 2%); inter-arrival KS p={ks_gap.pvalue:.3f}, "
                   f"arrival-time uniformity KS p={ks_uniform.pvalue:.3f} (need > 0.01)")
    assert ok


# -- 8 ----------------------------------------------------------------------------


def _burst_fixture():
    spot = VmTypeSpec("s.spot", Market.SPOT, 2, 4, 0.03, 32)
    burst = VmTypeSpec("b.burst", Market.BURSTABLE, 2, 8, 0.08, 32, baseline_fraction=0.2,
                       credit_accrual=24, initial_credits=10, burst_period=60)
    od = VmTypeSpec("o.od", Market.ON_DEMAND, 2, 4, 0.1, 32)
    task = TaskSpec(0, 10.0, {"s.spot": 300, "b.burst": 300, "o.od": 300})
    job = JobSpec((task,), 2700)
    env = EnvSpec()
    # six checkpoints every 300/7 s: the first would land at 103 s, after the hibernation
    s = VmInstance("s.spot#0", spot, queues=[[(0, Mode.BURST)], []])
    b = VmInstance("b.burst#0", burst)
    sol = ScheduleSolution({0: Placement("s.spot#0", 0, 60)}, [s, b], compute_d_spot(job, [spot, burst, od], env), 1.0)
    hib = [SimEvent(at=100, seq=0, kind=EventKind.HIBERNATE, vm_type="s.spot")]
    return job, [spot, burst, od], env, sol, hib


def test_criterion_8_credit_ledger(batch, verdict):
    cfg = load_config(CONFIG)
    worst = 0.0
    burstables = 0
    # every burstable of a fresh set of simulations (batch reports carry no VM objects)
    for rep in range(5):
        params = cfg.ils_params(derive_seed(cfg.seed, "burst-hads", rep))
        sol = primary_map(cfg.job, cfg.catalog, params, cfg.env)
        for sc in cfg.scenarios:
            seed = derive_seed(cfg.seed, "burst-hads", sc.id, rep)
            spots = [vt.id for vt in cfg.catalog if vt.market is Market.SPOT]
            evs = generate_events(sc, spots, cfg.job.deadline, np.random.default_rng(seed))
            res = simulate(cfg.job, cfg.catalog, cfg.env, sol, "burst-hads", evs, seed=seed, check=True)
            for vm in res.vms:
                if vm.vtype.burstable:
                    burstables += 1
                    gap = abs(vm.inst.cc - (vm.cc0 + vm.accrued - vm.consumed))
                    worst = max(worst, gap)
    job, catalog, env, sol, hib = _burst_fixture()
    res = simulate(job, catalog, env, sol, "burst-hads", hib, check=True)
    b = next(vm for vm in res.vms if vm.vtype.burstable)
    run = res.runs[0]
    consumed = b.consumed
    ok = worst <= 1.0 and abs(consumed - 5.0) < 1e-9 and run.instance == b.id and run.finished_at is not None
    verdict(8, ok, f"{burstables} burstables, max |cc_end - (cc0 + accrued - consumed)| = {worst:.2e} credits "
                   f"(<= 1 quantum); e=300 burst task on {run.instance} consumed {consumed:.9f} of 5 reserved credits")
    assert ok


# -- 9 ----------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path, verdict):
    cfg = load_config(CONFIG)
    cfg.replications = 2
    cfg.scenarios = [s for s in cfg.scenarios if s.id in ("sc1", "sc4")]
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(cfg, output_dir=a)
    again = load_config(CONFIG)
    again.replications = 2
    again.scenarios = [s for s in again.scenarios if s.id in ("sc1", "sc4")]
    run_experiment(again, output_dir=b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    same = files_a == files_b and all(filecmp.cmp(a / f, b / f, shallow=False) for f in files_a)
    traces = [f for f in files_a if f.parts[0] == "traces"]
    ok = same and len(traces) == 3 * 2 * 2 and (a / "runs.csv").exists()
    verdict(9, ok, f"{len(files_a)} output files ({len(traces)} traces) byte-identical across two runs: {same}")
    assert ok
