"""Exception taxonomy shared by all qslab modules.

The CLI maps ConfigError/ShapeError/ParameterError to exit code 1 and the
numerical failures to exit code 2.
"""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ParameterError(ValueError):
    """A scalar parameter (stride, k, rank, density, ...) is out of range."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry / a mask row has no kept position."""


class NumericalError(RuntimeError):
    """An iterative numerical routine failed (non-convergence, blow-up)."""


class CalibrationDivergenceError(NumericalError):
    """Calibration loss blew up; carries the loss trace seen so far."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = list(trace)


class MetricUndefinedError(ValueError):
    """A metric is undefined for the given reference (e.g. constant input)."""


class ConfigError(ValueError):
    """A run configuration file is missing, malformed, or inconsistent."""
