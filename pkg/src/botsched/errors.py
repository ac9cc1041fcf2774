class SchedulingError(Exception):
    """Base class for errors raised by the scheduling engine."""


class ValidationError(SchedulingError):
    pass


class InfeasibleDeadlineError(SchedulingError):
    pass


class UndefinedWeightError(SchedulingError):
    pass


class ConstructionFailure(SchedulingError):
    def __init__(self, task_id: int | None, reason: str):
        self.task_id = task_id
        super().__init__(f"cannot place task {task_id}: {reason}")


class CatalogExhaustedError(SchedulingError):
    pass


class InfeasibleMapError(SchedulingError):
    pass


class OracleTooLarge(SchedulingError):
    pass


class SimulationIntegrityError(SchedulingError):
    pass


class ConfigError(SchedulingError):
    pass


class ReportError(SchedulingError):
    pass
