"""Simulation events and Poisson hibernation/resume injection."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class EventKind(str, Enum):
    HIBERNATE = "hibernate"
    RESUME = "resume"
    VM_IDLE = "vm_idle"
    AC_BOUNDARY = "ac_boundary"
    TASK_FINISH = "task_finish"
    CHECKPOINT = "checkpoint"
    MIGRATION_DUE = "migration_due"
    SIM_END = "sim_end"


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    kind: EventKind = field(compare=False)
    instance: str | None = field(default=None, compare=False)
    task: int | None = field(default=None, compare=False)
    vm_type: str | None = field(default=None, compare=False)
    resume_delay: float | None = field(default=None, compare=False)
    token: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    k_h: float
    k_r: float
    seed: int = 0

    def __post_init__(self):
        if self.k_h < 0 or self.k_r < 0:
            raise ValueError("k_h and k_r must be >= 0")

    def rates(self, deadline: int) -> tuple[float, float]:
        """(lambda_h, lambda_r) in events per second."""
        return self.k_h / deadline, self.k_r / deadline


def poisson_arrivals(rate: float, horizon: float, rng: np.random.Generator) -> list[float]:
    if rate <= 0:
        return []
    out = []
    t = rng.exponential(1.0 / rate)
    while t <= horizon:
        out.append(float(t))
        t += rng.exponential(1.0 / rate)
    return out


def generate_events(
    scenario: ScenarioSpec,
    spot_types: list[str],
    deadline: int,
    rng: np.random.Generator,
) -> list[SimEvent]:
    """Hibernation events for every spot VM type, each carrying its resume
    delay (None when the scenario never resumes). Victims are picked when
    the event fires, since only then is the set of live instances known."""
    if deadline <= 0:
        raise ValueError("deadline must be > 0")
    lam_h, lam_r = scenario.rates(deadline)
    raw = []
    for vt in sorted(spot_types):
        for t in poisson_arrivals(lam_h, deadline, rng):
            delay = float(rng.exponential(1.0 / lam_r)) if lam_r > 0 else None
            raw.append((t, vt, delay))
    raw.sort(key=lambda r: (r[0], r[1]))
    return [
        SimEvent(at=int(np.ceil(t)), seq=i, kind=EventKind.HIBERNATE, vm_type=vt, resume_delay=delay)
        for i, (t, vt, delay) in enumerate(raw)
    ]
