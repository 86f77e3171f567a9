"""Exception types raised across the package."""


class MedusaError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(MedusaError, ValueError):
    pass


class InvalidArgumentError(MedusaError, ValueError):
    pass


class InvalidStateError(MedusaError, RuntimeError):
    pass


class InvalidLabelError(MedusaError, ValueError):
    pass


class InvalidDataError(MedusaError, ValueError):
    pass


class DegenerateVarianceError(MedusaError, ValueError):
    """Batch statistics requested over a single element."""


class UndefinedMetricError(MedusaError, ValueError):
    pass


class TrainingDivergedError(MedusaError, RuntimeError):
    pass


class CheckpointVersionError(MedusaError, ValueError):
    """Checkpoint format or contents do not match what the reader expects."""
