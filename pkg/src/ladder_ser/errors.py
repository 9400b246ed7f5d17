"""Exception hierarchy shared across the package."""


class LadderError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LadderError, ValueError):
    pass


class ParameterError(LadderError, ValueError):
    pass


class DegenerateBatchError(LadderError, ValueError):
    pass


class StateError(LadderError, RuntimeError):
    pass


class UndefinedMetricError(LadderError, ValueError):
    pass


class DegenerateTestError(LadderError, ValueError):
    pass


class ScheduleError(LadderError, ValueError):
    """A batch violated the labeled/unlabeled contract."""


class DataFormatError(LadderError, ValueError):
    pass


class DivergenceError(LadderError, FloatingPointError):
    pass


class CheckpointError(LadderError, IOError):
    pass
