"""Experiment configuration: YAML loading with line-precise errors, the
sample VM catalog and the synthetic job generator."""

from __future__ import annotations

import math
import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from botsched.errors import ConfigError
from botsched.events import ScenarioSpec
from botsched.model import EnvSpec, JobSpec, Market, TaskSpec, VmTypeSpec
from botsched.static import IlsParams

STRATEGIES = ("burst-hads", "hads-baseline", "ondemand-ils")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class VmTypeModel(_Strict):
    id: str
    market: Literal["spot", "on-demand", "burstable"]
    vcpus: int = Field(ge=1)
    memory: float = Field(gt=0)
    price: float = Field(ge=0)
    gflops: float = Field(ge=0)
    baseline_fraction: float = Field(1.0, gt=0, le=1)
    credit_accrual: float = Field(0.0, ge=0)
    initial_credits: float = Field(0.0, ge=0)
    burst_period: int = Field(60, gt=0)
    max_instances: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _burstable_baseline(self):
        if (self.market == "burstable") != (self.baseline_fraction < 1):
            raise ValueError("baseline_fraction < 1 exactly when market is burstable")
        return self

    def build(self) -> VmTypeSpec:
        return VmTypeSpec(**self.model_dump())


class TaskModel(_Strict):
    id: int
    rm: float = Field(gt=0)
    exec_time: Optional[dict[str, int]] = None
    duration: Optional[int] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one_time_source(self):
        if (self.exec_time is None) == (self.duration is None):
            raise ValueError("give exactly one of exec_time (per type) or duration (base)")
        return self


class GeneratorModel(_Strict):
    count: int
    duration: tuple[int, int] = (102, 330)
    memory: tuple[float, float] = (2.85, 12.20)
    seed: int = 0
    base_gflops: Optional[float] = Field(None, gt=0)

    @field_validator("duration", "memory")
    @classmethod
    def _range(cls, v):
        lo, hi = v
        if lo <= 0 or hi < lo:
            raise ValueError(f"range {list(v)} must satisfy 0 < lo <= hi")
        return v


class JobModel(_Strict):
    name: str = "job"
    deadline: int = Field(gt=0)
    tasks: Optional[list[TaskModel]] = None
    generator: Optional[GeneratorModel] = None
    base_gflops: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.tasks is None) == (self.generator is None):
            raise ValueError("give exactly one of tasks or generator")
        return self


class EnvModel(_Strict):
    startup_overhead: int = Field(60, ge=0)
    alpha: float = Field(0.5, ge=0, le=1)
    billing_granularity: int = Field(1, ge=1)
    ac_len: int = Field(900, gt=0)
    ckpt_overhead_budget: float = Field(0.10, ge=0)
    ckpt_unit_cost: int = Field(5, gt=0)


class IlsModel(_Strict):
    max_iteration: int = Field(200, ge=1)
    max_attempt: int = Field(50, ge=1)
    swap_rate: float = Field(0.10, gt=0, le=1)
    max_failed: int = Field(20, ge=1)
    relax_rate: float = Field(0.25, gt=0, le=1)
    burst_rate: float = Field(0.2, gt=0, le=1)


class ScenarioModel(_Strict):
    id: str
    k_h: float = Field(ge=0)
    k_r: float = Field(ge=0)


class ExperimentModel(_Strict):
    seed: int = 0
    replications: int = Field(1, ge=1)
    output_dir: str = "results"
    strategies: list[Literal["burst-hads", "hads-baseline", "ondemand-ils"]] = Field(min_length=1)
    catalog: list[VmTypeModel] = Field(min_length=1)
    job: JobModel
    env: EnvModel = EnvModel()
    ils: IlsModel = IlsModel()
    scenarios: list[ScenarioModel] = Field(min_length=1)

    @model_validator(mode="after")
    def _references(self):
        ids = [vt.id for vt in self.catalog]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate VM type ids in catalog")
        for t in self.job.tasks or ():
            if t.exec_time is not None:
                missing = set(ids) - set(t.exec_time)
                unknown = set(t.exec_time) - set(ids)
                if missing or unknown:
                    raise ValueError(
                        f"task {t.id}: exec_time must cover exactly the catalog "
                        f"(missing {sorted(missing)}, unknown {sorted(unknown)})"
                    )
        scen = [s.id for s in self.scenarios]
        if len(set(scen)) != len(scen):
            raise ValueError("duplicate scenario ids")
        return self


class ExperimentConfig:
    """Validated, built configuration: domain objects ready for a run."""

    def __init__(self, model: ExperimentModel, source: str | None = None):
        self.model = model
        self.source = source
        self.catalog = [vt.build() for vt in model.catalog]
        self.env = EnvSpec(**model.env.model_dump())
        self.strategies = list(model.strategies)
        self.replications = model.replications
        self.seed = model.seed
        self.output_dir = Path(model.output_dir)
        self.scenarios = [ScenarioSpec(s.id, s.k_h, s.k_r) for s in model.scenarios]
        self.job_name = model.job.name
        self.job = build_job(model.job, self.catalog)

    def ils_params(self, seed: int) -> IlsParams:
        return IlsParams(**self.model.ils.model_dump(), seed=seed)


def scale_duration(base: float, base_gflops: float, vt: VmTypeSpec) -> int:
    return max(1, math.ceil(base * base_gflops / vt.core_gflops - 1e-9))


def default_base_gflops(catalog: list[VmTypeSpec]) -> float:
    return min(vt.core_gflops for vt in catalog if vt.gflops > 0)


def generate_job(block: GeneratorModel, seed: int | None, catalog: list[VmTypeSpec], deadline: int) -> JobSpec:
    """Sample base durations and footprints uniformly; per-type durations scale
    with per-core Gflops relative to ``base_gflops`` (slowest core by default)."""
    if block.count <= 0:
        raise ConfigError("generator count must be >= 1 (empty job)")
    rng = np.random.default_rng(block.seed if seed is None else seed)
    base_gflops = block.base_gflops or default_base_gflops(catalog)
    lo, hi = block.duration
    durations = rng.integers(lo, hi, endpoint=True, size=block.count)
    mlo, mhi = block.memory
    memory = rng.uniform(mlo, mhi, size=block.count)
    tasks = []
    for i, (d, rm) in enumerate(zip(durations, memory)):
        exec_time = {vt.id: scale_duration(int(d), base_gflops, vt) for vt in catalog}
        tasks.append(TaskSpec(id=i, rm=round(float(rm), 2), exec_time=exec_time))
    return JobSpec(tuple(tasks), deadline)


def build_job(job: JobModel, catalog: list[VmTypeSpec]) -> JobSpec:
    if job.generator is not None:
        return generate_job(job.generator, None, catalog, job.deadline)
    base_gflops = job.base_gflops or default_base_gflops(catalog)
    tasks = []
    for t in job.tasks:
        if t.exec_time is not None:
            exec_time = dict(t.exec_time)
        else:
            exec_time = {vt.id: scale_duration(t.duration, base_gflops, vt) for vt in catalog}
        tasks.append(TaskSpec(t.id, t.rm, exec_time))
    if not tasks:
        raise ConfigError("job has no tasks")
    return JobSpec(tuple(tasks), job.deadline)


# -- loading --------------------------------------------------------------------


def _node_line(root: yaml.Node | None, loc: tuple) -> int | None:
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    try:
        model = ExperimentModel.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
            line = _node_line(root, loc)
            path = ".".join(str(p) for p in loc) or "<root>"
            lines.append(f"{source}:{line}: {path}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None
    try:
        return ExperimentConfig(model, source)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def derive_seed(master: int, *parts) -> int:
    """Stable 32-bit seed from a master seed and labels (strategy, scenario, index)."""
    words = [master & 0xFFFFFFFF]
    for p in parts:
        words.append(zlib.crc32(str(p).encode()) if not isinstance(p, int) else p & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


SAMPLE_CATALOG = [
    VmTypeSpec("c3.large.spot", Market.SPOT, 2, 3.75, 0.0299, 32.0),
    VmTypeSpec("c4.large.spot", Market.SPOT, 2, 3.75, 0.0366, 40.0),
    VmTypeSpec("c3.xlarge.spot", Market.SPOT, 4, 7.50, 0.0634, 64.0),
    VmTypeSpec("c3.large.od", Market.ON_DEMAND, 2, 3.75, 0.105, 32.0),
    VmTypeSpec("c4.large.od", Market.ON_DEMAND, 2, 3.75, 0.100, 40.0),
    VmTypeSpec("c3.xlarge.od", Market.ON_DEMAND, 4, 7.50, 0.199, 64.0),
    VmTypeSpec(
        "t3.large.burst",
        Market.BURSTABLE,
        2,
        8.0,
        0.0832,
        44.0,
        baseline_fraction=0.2,
        credit_accrual=24.0,
        initial_credits=0.0,
        burst_period=60,
    ),
]

SAMPLE_SCENARIOS = [
    ScenarioSpec("sc1", 1, 0),
    ScenarioSpec("sc2", 5, 0),
    ScenarioSpec("sc3", 1, 5),
    ScenarioSpec("sc4", 5, 5),
    ScenarioSpec("sc5", 3, 2.5),
]


def j60_job(seed: int = 60, catalog: list[VmTypeSpec] | None = None, deadline: int = 2700) -> JobSpec:
    block = GeneratorModel(count=60, duration=(102, 330), memory=(2.85, 12.20), seed=seed)
    return generate_job(block, None, catalog or SAMPLE_CATALOG, deadline)
