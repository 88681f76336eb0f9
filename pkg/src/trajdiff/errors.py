"""Exception hierarchy shared by every subsystem."""


class TrajDiffError(Exception):
    """Base error. Keyword context is kept on ``.context`` for callers that inspect it."""

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class ShapeError(TrajDiffError, ValueError):
    pass


class ScheduleError(TrajDiffError, ValueError):
    pass


class StepRangeError(TrajDiffError, IndexError):
    """Diffusion step index outside ``1..N`` (or a budget outside ``0..N``)."""


class ConstraintError(TrajDiffError, ValueError):
    pass


class GuidanceError(TrajDiffError, FloatingPointError):
    pass


class DatasetError(TrajDiffError, ValueError):
    pass


class ConfigError(TrajDiffError, ValueError):
    pass


class CheckpointError(TrajDiffError, ValueError):
    pass


class TrainingError(TrajDiffError, RuntimeError):
    pass


class PlotError(TrajDiffError, ValueError):
    pass
