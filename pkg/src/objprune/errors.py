"""Exception types raised across the package."""


class ObjPruneError(Exception):
    """Base class for all package errors."""


class EmptyStack(ObjPruneError):
    pass


class EmptyPrompt(ObjPruneError):
    pass


class EmptyGeneration(ObjPruneError):
    pass


class ZeroConfidence(ObjPruneError):
    pass


class DegenerateAttention(ObjPruneError):
    pass


class DimensionMismatch(ObjPruneError, ValueError):
    pass


class NonFiniteActivation(ObjPruneError):
    pass


class StaleCache(ObjPruneError):
    pass


class EmptyDataset(ObjPruneError):
    pass


class DivergedLoss(ObjPruneError):
    pass


class EmptyBatch(ObjPruneError):
    pass


class SchemaMismatch(ObjPruneError):
    pass


class ConfigError(ObjPruneError):
    pass


class MissingArtifact(ObjPruneError):
    pass


class ConfigHashMismatch(ObjPruneError):
    pass
