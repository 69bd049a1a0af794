"""Exception types raised across the package."""


class RisaError(Exception):
    """Base class for all package errors."""


# mesh
class NonManifold(RisaError, ValueError):
    pass


class InconsistentWinding(RisaError, ValueError):
    pass


class DegenerateFace(RisaError, ValueError):
    pass


class ZeroAreaFace(RisaError, ValueError):
    pass


class InvalidRotation(RisaError, ValueError):
    pass


class ObjFormatError(RisaError, ValueError):
    pass


# features
class ConnectivityMismatch(RisaError, ValueError):
    pass


class DegenerateGeometry(RisaError, ValueError):
    pass


class NoCommonPart(RisaError, ValueError):
    pass


# tensor / model
class ShapeMismatch(RisaError, ValueError):
    pass


class NonFinite(RisaError, FloatingPointError):
    pass


class CycleDetected(RisaError, RuntimeError):
    pass


class AllPartsMissing(RisaError, ValueError):
    pass


# training
class NoValidTriplet(RisaError, ValueError):
    pass


class DivergedLoss(RisaError, FloatingPointError):
    pass


# retrieval
class EmptyIndex(RisaError, ValueError):
    pass


class EmptyQuerySet(RisaError, ValueError):
    pass


# dataset
class DegenerateDeformation(RisaError, ValueError):
    pass


class TooFewShapes(RisaError, ValueError):
    pass


class MissingLabels(RisaError, FileNotFoundError):
    pass


class ConfigError(RisaError, ValueError):
    pass
