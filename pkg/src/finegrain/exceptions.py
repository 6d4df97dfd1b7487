"""Exception types raised across the package."""


class FineGrainError(Exception):
    """Base class for all package errors."""


class DimensionError(FineGrainError, ValueError):
    """Tensor shapes are incompatible for the requested primitive."""


class ConfigurationError(FineGrainError, ValueError):
    """A rule table, schema, or hyperparameter is invalid."""


class ContractError(FineGrainError, ValueError):
    """A caller violated an operation precondition."""


class TrainingDivergedError(FineGrainError, RuntimeError):
    """Training produced a non-finite loss."""


class ArtifactMismatchError(FineGrainError, ValueError):
    """A checkpoint does not match the schema or vocabulary it is used with."""


class UndefinedMetricError(FineGrainError, ValueError):
    """A metric has no value on the given data, e.g. AP with no positives."""
