"""Batch pipeline: build a map per strategy, simulate it under every scenario,
account, and write the run table, comparison report and event traces."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from botsched.accounting import ComparisonReport, RunReport, account, comparison_report, runs_csv
from botsched.config import ExperimentConfig, derive_seed
from botsched.errors import SimulationIntegrityError
from botsched.events import generate_events
from botsched.model import EnvSpec, JobSpec, Market, ScheduleSolution, VmTypeSpec, compute_d_spot
from botsched.simulator import simulate
from botsched.static import IlsParams, ils, initial_solution, primary_map

log = logging.getLogger("botsched")

POLICY = {"burst-hads": "burst-hads", "hads-baseline": "hads-baseline", "ondemand-ils": "static"}


def strategy_catalog(strategy: str, catalog: list[VmTypeSpec]) -> list[VmTypeSpec]:
    """VM types a strategy may ever launch."""
    if strategy == "hads-baseline":
        return [vt for vt in catalog if vt.market is not Market.BURSTABLE]
    if strategy == "ondemand-ils":
        return [vt for vt in catalog if vt.market is Market.ON_DEMAND]
    return list(catalog)


def build_map(strategy: str, job: JobSpec, catalog: list[VmTypeSpec], env: EnvSpec, params: IlsParams) -> ScheduleSolution:
    if strategy == "burst-hads":
        return primary_map(job, catalog, params, env)
    if strategy == "hads-baseline":
        d_spot = compute_d_spot(job, catalog, env)
        return initial_solution(job, [vt for vt in catalog if vt.market is Market.SPOT], d_spot, env)
    if strategy == "ondemand-ils":
        return ils(job, catalog, params, env, pool_market=Market.ON_DEMAND)
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class RunOutput:
    report: RunReport | None
    trace: list[dict]
    error: str | None = None


@dataclass
class ExperimentResult:
    reports: list[RunReport]
    comparison: ComparisonReport | None
    errors: list[str] = field(default_factory=list)
    traces: dict[str, list[dict]] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 1 if self.errors else 0


@dataclass(frozen=True)
class _Group:
    """One map, simulated under every scenario."""

    strategy: str
    replication: int
    master: int
    job: JobSpec
    catalog: tuple
    env: EnvSpec
    ils: dict
    scenarios: tuple
    keep_trace: bool


def _run_group(g: _Group) -> list[tuple[str, str, int, RunOutput]]:
    map_seed = derive_seed(g.master, g.strategy, g.replication)
    params = IlsParams(**g.ils, seed=map_seed)
    catalog = list(g.catalog)
    sol = build_map(g.strategy, g.job, catalog, g.env, params)
    sim_catalog = strategy_catalog(g.strategy, catalog)
    spot_types = [vt.id for vt in sim_catalog if vt.market is Market.SPOT]
    out = []
    for sc in g.scenarios:
        seed = derive_seed(g.master, g.strategy, sc.id, g.replication)
        rng = np.random.default_rng(seed)
        events = generate_events(sc, spot_types, g.job.deadline, rng)
        try:
            res = simulate(g.job, sim_catalog, g.env, sol, POLICY[g.strategy], events, seed=seed, check=True)
        except SimulationIntegrityError as exc:
            msg = f"{g.strategy}/{sc.id}/{g.replication}: {exc}"
            out.append((g.strategy, sc.id, g.replication, RunOutput(None, [], msg)))
            continue
        report = account(res, g.env, g.strategy, sc.id, g.replication, seed)
        out.append((g.strategy, sc.id, g.replication, RunOutput(report, res.trace if g.keep_trace else [])))
    return out


def run_experiment(
    config: ExperimentConfig,
    output_dir: str | Path | None = None,
    strategies: list[str] | None = None,
    seed: int | None = None,
    trace: bool = True,
    workers: int = 1,
    write: bool = True,
) -> ExperimentResult:
    master = config.seed if seed is None else seed
    chosen = [s for s in config.strategies if strategies is None or s in strategies]
    scenarios = tuple(config.scenarios)
    groups = [
        _Group(st, rep, master, config.job, tuple(config.catalog), config.env,
               config.model.ils.model_dump(), scenarios, trace)
        for st in chosen
        for rep in range(config.replications)
    ]
    log.info("%d strategies x %d replications x %d scenarios", len(chosen), config.replications, len(scenarios))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_group, groups))
    else:
        batches = []
        for g in groups:
            log.info("map %s rep %d", g.strategy, g.replication)
            batches.append(_run_group(g))

    rows = [r for b in batches for r in b]
    scen_order = [s.id for s in scenarios]
    rows.sort(key=lambda r: (chosen.index(r[0]), scen_order.index(r[1]), r[2]))
    reports, errors, traces = [], [], {}
    for st, sc, rep, out in rows:
        if out.error:
            log.error("simulation integrity error in %s", out.error)
            errors.append(out.error)
            continue
        reports.append(out.report)
        if trace:
            traces[f"{st}_{sc}_{rep}"] = out.trace

    by_strategy: dict[str, list[RunReport]] = {}
    for r in reports:
        by_strategy.setdefault(r.strategy, []).append(r)
    comparison = comparison_report(by_strategy) if by_strategy and not errors else None
    result = ExperimentResult(reports, comparison, errors, traces)
    if write:
        write_outputs(result, Path(output_dir) if output_dir is not None else config.output_dir)
    return result


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_outputs(result: ExperimentResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.csv").write_text(runs_csv(result.reports))
    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)
    for r in result.reports:
        doc = {k: v for k, v in r.__dict__.items() if k != "instances"}
        doc["instances"] = [line.__dict__ for line in r.instances]
        (reports_dir / f"{r.strategy}_{r.scenario}_{r.replication}.json").write_text(_dump(doc) + "\n")
    if result.comparison is not None:
        (out / "comparison.txt").write_text(result.comparison.text())
        (out / "comparison.csv").write_text(result.comparison.csv())
        (out / "comparison.json").write_text(_dump(result.comparison.to_dict()) + "\n")
    if result.traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for name, rows in result.traces.items():
            (tdir / f"{name}.jsonl").write_text("".join(_dump(row) + "\n" for row in rows))
    if result.errors:
        (out / "errors.txt").write_text("\n".join(result.errors) + "\n")
