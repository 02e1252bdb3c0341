"""Exception types shared across the package."""


class MtloptError(Exception):
    """Base class for all package errors."""


class ShapeError(MtloptError, ValueError):
    """Tensor dimensions are inconsistent with the operation's contract."""


class ConfigError(MtloptError, ValueError):
    """Invalid configuration value (bad layer chain, bad hyperparameter, ...)."""


class DataError(MtloptError, ValueError):
    """A batch is missing required inputs or targets."""


class LabelError(MtloptError, ValueError):
    """A class-index target is outside the valid range."""


class TaskLookupError(MtloptError, KeyError):
    """Referenced task id has no registered state."""


class NumericError(MtloptError, ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finiteness is required."""


class TapeError(MtloptError, RuntimeError):
    """A computation-tape contract was violated (non-scalar loss, foreign tensor)."""


class StateError(MtloptError, RuntimeError):
    """Mutable state is corrupt or stale (negative variance, outdated snapshot)."""
