"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
0 success, 1 usage, 2 I/O, 3 undefined metric / degenerate data,
4 numerical divergence.
"""


class ArousalError(Exception):
    exit_code = 1


class ConfigError(ArousalError, ValueError):
    exit_code = 1


class InputError(ArousalError, ValueError):
    exit_code = 3


class ShapeError(InputError):
    pass


class StateError(ArousalError, RuntimeError):
    exit_code = 3


class LengthError(InputError):
    pass


class ChannelLookupError(ArousalError, KeyError):
    exit_code = 1

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class PartitionError(ArousalError, ValueError):
    exit_code = 3


class GenerationError(ArousalError, RuntimeError):
    exit_code = 3


class FitError(ArousalError, ValueError):
    exit_code = 3


class StatisticsError(ArousalError, ValueError):
    exit_code = 3


class DegenerateBatchError(ArousalError, ValueError):
    exit_code = 3


class TrainingError(ArousalError, RuntimeError):
    exit_code = 3


class UndefinedMetricError(ArousalError, ValueError):
    exit_code = 3


class DivergenceError(ArousalError, FloatingPointError):
    exit_code = 4


class ContainerError(ArousalError, OSError):
    """Base for on-disk container problems."""

    exit_code = 2


class MalformedHeaderError(ContainerError):
    pass


class TruncatedDataError(ContainerError):
    pass


class DimensionMismatchError(ContainerError):
    pass
