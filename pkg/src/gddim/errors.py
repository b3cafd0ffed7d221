"""Exception types raised across the package."""


class GddimError(Exception):
    """Base class for all package errors."""


class ScheduleInvalidError(GddimError, ValueError):
    pass


class ScheduleInconsistentError(GddimError, ValueError):
    pass


class DomainError(GddimError, ValueError):
    pass


class InputError(GddimError, ValueError):
    pass


class ConditioningError(GddimError, ArithmeticError):
    """A covariance or factor is numerically singular."""

    def __init__(self, msg, t=None):
        super().__init__(msg if t is None else f"{msg} (t={t!r})")
        self.t = t


class DecompositionError(GddimError, ArithmeticError):
    pass


class SolverAccuracyError(GddimError, ArithmeticError):
    pass


class StiffnessError(GddimError, ArithmeticError):
    def __init__(self, msg, t=None):
        super().__init__(msg if t is None else f"{msg} (t={t!r})")
        self.t = t


class InvalidSigmaError(GddimError, ValueError):
    pass


class CacheError(GddimError):
    """Missing, stale or mismatched coefficient cache."""


class ConfigError(GddimError, ValueError):
    pass
