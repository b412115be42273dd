"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the CLI exit code it maps to.
"""


class DepoisError(Exception):
    exit_code = 1


class ConfigError(DepoisError, ValueError):
    """Invalid parameter, missing label, unknown config key, ..."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor or network shapes do not line up."""


class DataError(DepoisError):
    """Malformed or unreadable dataset or checkpoint file."""

    exit_code = 3


class TrainingError(DepoisError, RuntimeError):
    """A training loop diverged or failed a sanity check."""

    exit_code = 4


class NonFiniteError(TrainingError, FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class GateFailure(DepoisError):
    """A strict-mode acceptance gate did not hold."""

    exit_code = 5
