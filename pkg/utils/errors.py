"""Exception hierarchy shared by the lab modules and the command handlers."""


class CdgLabError(Exception):
    """Base class for every error raised by the lab."""


class AutodiffError(CdgLabError):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = ", ".join(str(s) for s in self.shapes)
        message = f"shape mismatch in '{op}': {shown}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DiffusionError(CdgLabError):
    pass


class ScheduleError(DiffusionError):
    pass


class ModelError(CdgLabError):
    pass


class CheckpointError(ModelError):
    pass


class LossError(CdgLabError):
    def __init__(self, message: str, term: str = ""):
        self.term = term
        super().__init__(message)


class NonFiniteLossError(LossError):
    pass


class ReplayBufferError(CdgLabError):
    pass


class DatasetError(CdgLabError):
    pass


class MetricError(CdgLabError):
    pass


class ConfigError(CdgLabError):
    pass


class CollapseError(CdgLabError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, task: int, step: int, term: str = ""):
        self.task = task
        self.step = step
        self.term = term
        super().__init__(f"{message} (task={task}, step={step}{', term=' + term if term else ''})")
