"""Exception hierarchy shared by every parbeam module."""


class ParbeamError(Exception):
    """Base class for all errors raised by parbeam."""


class InvalidArgument(ParbeamError, ValueError):
    pass


class SupportViolation(ParbeamError, ValueError):
    """A shift or rasterisation would move nonzero mass outside the reconstruction disk."""


class ResourceLimit(ParbeamError, MemoryError):
    pass


class ContractViolation(ParbeamError, RuntimeError):
    """An API was used out of order, e.g. backward before forward."""


class CalibrationFailed(ParbeamError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDiverged(ParbeamError, FloatingPointError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class UndefinedMetric(ParbeamError, ZeroDivisionError):
    pass
