"""Exception hierarchy."""


class FEGMMError(Exception):
    """Base class; ``ids`` names the individuals involved, if any."""

    def __init__(self, message: str, ids=None):
        super().__init__(message)
        self.ids = list(ids or [])


class SchemaError(FEGMMError):
    pass


class ParseError(FEGMMError):
    pass


class DataError(FEGMMError):
    pass


class UnderIdentifiedError(DataError):
    pass


class NumericError(FEGMMError):
    pass


class WeightingError(FEGMMError):
    pass


class WeakIdentificationError(FEGMMError):
    pass


class ConvergenceError(FEGMMError):
    def __init__(self, message: str, ids=None, last=None, trajectory=None):
        super().__init__(message, ids)
        self.last = last
        self.trajectory = list(trajectory or [])
