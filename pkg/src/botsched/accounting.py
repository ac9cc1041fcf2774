"""Per-run cost and makespan accounting and the strategy comparison report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from botsched.errors import ReportError
from botsched.model import SECONDS_PER_HOUR, EnvSpec
from botsched.simulator import SimResult, SimVm


@dataclass(frozen=True)
class InstanceLine:
    instance: str
    vm_type: str
    market: str
    origin: str
    launched_at: int
    terminated_at: int
    hibernated_seconds: int
    billed_seconds: int
    cost: float


@dataclass
class RunReport:
    strategy: str
    scenario: str
    replication: int
    seed: int
    total_cost: float
    makespan: int
    deadline_met: bool
    hibernation_count: int
    resume_count: int
    launched_on_demand_count: int
    instances: list[InstanceLine] = field(default_factory=list)
    deadline_risks: list[dict] = field(default_factory=list)
    unfinished: list[int] = field(default_factory=list)


def billed_seconds(active: int, granularity: int) -> int:
    return math.ceil(active / granularity) * granularity if active > 0 else 0


def instance_cost(vm: SimVm, env: EnvSpec, end: int | None = None) -> InstanceLine:
    """Price times active time (launch to termination minus hibernation),
    rounded up to the billing granularity."""
    stop = vm.terminated_at if vm.terminated_at is not None else end
    if stop is None:
        raise ReportError(f"instance {vm.id} has no termination time")
    hibernated = 0
    for a, b in vm.inst.hibernation_intervals:
        hibernated += (stop if b is None else b) - a
    active = stop - vm.inst.launched_at - hibernated
    billed = billed_seconds(active, env.billing_granularity)
    return InstanceLine(
        instance=vm.id,
        vm_type=vm.vtype.id,
        market=vm.market.value,
        origin=vm.origin,
        launched_at=vm.inst.launched_at,
        terminated_at=stop,
        hibernated_seconds=hibernated,
        billed_seconds=billed,
        cost=vm.vtype.price * billed / SECONDS_PER_HOUR,
    )


def account(result: SimResult, env: EnvSpec, strategy: str, scenario: str, replication: int, seed: int) -> RunReport:
    lines = [instance_cost(vm, env, result.end_time) for vm in result.vms]
    return RunReport(
        strategy=strategy,
        scenario=scenario,
        replication=replication,
        seed=seed,
        total_cost=sum(line.cost for line in lines),
        makespan=result.makespan,
        deadline_met=result.deadline_met,
        hibernation_count=result.hibernations,
        resume_count=result.resumes,
        launched_on_demand_count=result.ondemand_launched,
        instances=lines,
        deadline_risks=list(result.deadline_risks),
        unfinished=list(result.unfinished),
    )


RUN_COLUMNS = (
    "strategy", "scenario", "replication", "seed", "cost", "makespan", "deadline_met",
    "hibernations", "resumes", "on_demand_launched", "deadline_risks",
)


def runs_csv(reports: list[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for r in reports:
        w.writerow([
            r.strategy, r.scenario, r.replication, r.seed, f"{r.total_cost:.6f}", r.makespan,
            str(r.deadline_met).lower(), r.hibernation_count, r.resume_count,
            r.launched_on_demand_count, len(r.deadline_risks),
        ])
    return buf.getvalue()


# -- comparison -----------------------------------------------------------------


def pct_diff(a: float, b: float) -> float:
    """100 * (a - b) / a: positive when ``b`` is lower than the reference ``a``."""
    if a == 0:
        return 0.0 if b == 0 else -math.inf
    return 100.0 * (a - b) / a


@dataclass(frozen=True)
class StrategySummary:
    strategy: str
    scenario: str
    runs: int
    mean_cost: float
    mean_makespan: float
    violation_rate: float
    deadline_risks: int


@dataclass(frozen=True)
class PairDiff:
    scenario: str
    reference: str
    candidate: str
    cost_diff: float
    makespan_diff: float


@dataclass
class ComparisonReport:
    summaries: list[StrategySummary]
    diffs: list[PairDiff]

    def to_dict(self) -> dict:
        return {
            "summaries": [s.__dict__ for s in self.summaries],
            "diffs": [d.__dict__ for d in self.diffs],
        }

    def text(self) -> str:
        head = f"{'scenario':<10}{'strategy':<16}{'runs':>5}{'cost($)':>11}{'makespan(s)':>13}{'viol.%':>8}{'risks':>7}"
        out = [head, "-" * len(head)]
        for s in self.summaries:
            out.append(
                f"{s.scenario:<10}{s.strategy:<16}{s.runs:>5}{s.mean_cost:>11.4f}"
                f"{s.mean_makespan:>13.1f}{100 * s.violation_rate:>8.1f}{s.deadline_risks:>7}"
            )
        if self.diffs:
            out.append("")
            head2 = f"{'scenario':<10}{'reference':<16}{'candidate':<16}{'cost diff%':>12}{'mkp diff%':>12}"
            out += [head2, "-" * len(head2)]
            for d in self.diffs:
                out.append(
                    f"{d.scenario:<10}{d.reference:<16}{d.candidate:<16}"
                    f"{d.cost_diff:>12.2f}{d.makespan_diff:>12.2f}"
                )
        return "\n".join(out) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "strategy", "runs", "mean_cost", "mean_makespan", "violation_rate", "deadline_risks"])
        for s in self.summaries:
            w.writerow([s.scenario, s.strategy, s.runs, f"{s.mean_cost:.6f}", f"{s.mean_makespan:.3f}",
                        f"{s.violation_rate:.4f}", s.deadline_risks])
        return buf.getvalue()


def comparison_report(runs: dict[str, list[RunReport]]) -> ComparisonReport:
    """Means per (scenario, strategy) and pairwise diffs, each strategy taken in
    turn as the reference ``a`` of 100*(a-b)/a."""
    if not runs or any(not v for v in runs.values()):
        raise ReportError("need at least one run per strategy")
    scen_sets = {name: sorted({r.scenario for r in v}) for name, v in runs.items()}
    first = next(iter(scen_sets.values()))
    for name, scen in scen_sets.items():
        if scen != first:
            raise ReportError(f"strategy {name} covers scenarios {scen}, expected {first}")
        for r in runs[name]:
            if r.strategy != name:
                raise ReportError(f"run of {r.strategy!r} filed under {name!r}")

    summaries: list[StrategySummary] = []
    means: dict[tuple[str, str], StrategySummary] = {}
    for scen in first:
        for name in runs:
            rs = [r for r in runs[name] if r.scenario == scen]
            s = StrategySummary(
                strategy=name,
                scenario=scen,
                runs=len(rs),
                mean_cost=sum(r.total_cost for r in rs) / len(rs),
                mean_makespan=sum(r.makespan for r in rs) / len(rs),
                violation_rate=sum(not r.deadline_met for r in rs) / len(rs),
                deadline_risks=sum(len(r.deadline_risks) for r in rs),
            )
            summaries.append(s)
            means[(scen, name)] = s
    diffs = []
    names = list(runs)
    for scen in first:
        for a in names:
            for b in names:
                if a == b:
                    continue
                sa, sb = means[(scen, a)], means[(scen, b)]
                diffs.append(PairDiff(scen, a, b, pct_diff(sa.mean_cost, sb.mean_cost),
                                      pct_diff(sa.mean_makespan, sb.mean_makespan)))
    return ComparisonReport(summaries, diffs)
