"""Exception hierarchy shared by the library and the CLI."""

from typing import Optional


class SlogError(Exception):
    """Base class for every failure raised by the toolkit."""


class AsymmetricGraphError(SlogError):
    pass


class IsolatedNodeError(SlogError):
    pass


class InvalidGraphError(SlogError):
    """Adjacency is not a simple graph with non-negative weights."""


class NegativeWeightError(InvalidGraphError):
    pass


class SelfLoopError(InvalidGraphError):
    pass


class DuplicateEdgeError(SlogError):
    pass


class OrderOutOfRangeError(SlogError):
    pass


class DimensionMismatchError(SlogError):
    pass


class NonInvertibleFilterError(SlogError):
    pass


class InvalidGraphParamsError(SlogError):
    pass


class ConnectivityError(SlogError):
    pass


class DegenerateFilterError(SlogError):
    pass


class DivisibilityError(SlogError):
    pass


class VersionMismatchError(SlogError):
    pass


class CorruptPayloadError(SlogError):
    pass


class SingularSystemError(SlogError):
    pass


class ZeroScaleError(SlogError):
    """Raised when a normalizing norm (target matrix or vector) is zero."""


class NegativeThresholdError(SlogError):
    pass


class StaleTraceError(SlogError):
    pass


class GraphMismatchError(SlogError):
    pass


class InvalidParameterError(SlogError, ValueError):
    """An argument outside its documented range."""


class TrainingDivergedError(SlogError):
    def __init__(self, message: str, log: Optional[dict] = None):
        super().__init__(message)
        self.log = log or {}
