"""Exception types raised across the package."""


class HashExitError(Exception):
    """Base class for all package errors."""


class DimensionError(HashExitError):
    """Operand shapes are incompatible with the requested operation."""


class BatchSizeError(HashExitError):
    """Batch is too small for the requested operation (e.g. train-mode BN)."""


class GradientError(HashExitError):
    """Backward pass requested through a non-differentiable operation."""


class NonFiniteError(HashExitError):
    """NaN or Inf encountered where finite values are required."""


class ConfigError(HashExitError):
    """Invalid configuration value or malformed config file."""


class SamplingError(HashExitError):
    """Batch composition violates the P x K contract (missing positives/negatives)."""


class LabelError(HashExitError):
    """Class label outside the classifier's range."""


class EncodingError(HashExitError):
    """Sign vector cannot be packed into a hash code."""


class MetricError(HashExitError):
    """Hash codes are incomparable (length/stage mismatch)."""


class RetrievalError(HashExitError):
    """Gallery is empty or otherwise unusable for retrieval."""


class PipelineError(HashExitError):
    """Encoder stages invoked out of order."""


class PolicyError(HashExitError):
    """Exit policy is missing required calibration or trained state."""


class EvaluationError(HashExitError):
    """No valid queries, or evaluation inputs are inconsistent."""


class BudgetError(HashExitError):
    """Requested compute budget is infeasible."""


class CheckpointError(HashExitError):
    """Checkpoint manifest/blob pair is malformed or inconsistent."""


class DependencyError(HashExitError):
    """A command prerequisite artifact is missing; message names the artifact."""
