"""Exception hierarchy shared by the compiler passes."""


class PlanError(Exception):
    """Base class for every error raised by parplan."""

    phase = "plan"


class GraphError(PlanError):
    phase = "graph"


class SchemaError(GraphError):
    pass


class TransformError(PlanError):
    phase = "transform"


class ScheduleError(PlanError):
    phase = "schedule"


class CoverageError(PlanError):
    phase = "materialize"


class MaterializeError(PlanError):
    phase = "materialize"


class CommPlanError(PlanError):
    phase = "commplan"


class SimulationError(PlanError):
    phase = "simulate"


class SimulationDeadlock(SimulationError):
    def __init__(self, waiting):
        self.waiting = dict(waiting)
        lines = ", ".join(f"dev{d}:{t}" for d, t in sorted(self.waiting.items()))
        super().__init__(f"simulation deadlock, waiting tasks: {lines}")


class ExecutionError(PlanError):
    phase = "refexec"


class UnsupportedOpError(ExecutionError):
    def __init__(self, kinds):
        self.kinds = sorted(set(kinds))
        super().__init__("reference interpreter does not support: " + ", ".join(self.kinds))


class StrategyError(PlanError):
    phase = "strategy"
