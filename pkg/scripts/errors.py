"""Exception hierarchy shared by every DF2AM module."""

from typing import Optional


class DF2AMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DF2AMError):
    """Invalid or inconsistent configuration."""


class SamplingError(ConfigError):
    """The dataset cannot satisfy the requested batch composition."""


class ShapeError(DF2AMError):
    """Array shapes do not agree."""

    def __init__(self, message: str, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message}: expected {tuple(expected)}, got {tuple(actual)}"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class LabelError(DF2AMError):
    """Identity label outside the classifier's range."""


class NormalizationError(DF2AMError):
    """A feature vector is too close to zero to be L2-normalized."""

    def __init__(self, sample: int, norm: float, eps: float):
        super().__init__(
            f"sample {sample} has norm {norm:.3e} below normalization epsilon {eps:.0e}"
        )
        self.sample = sample
        self.norm = norm


class NumericalError(DF2AMError):
    """A non-finite value appeared in a forward computation."""

    def __init__(self, primitive: str, detail: str = ""):
        message = f"non-finite value produced by '{primitive}'"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.primitive = primitive


class TrainingAborted(NumericalError):
    """Training stopped because a loss term became non-finite."""

    def __init__(self, term: str, step: int, checkpoint: Optional[str] = None):
        detail = f"step {step}"
        if checkpoint:
            detail += f", last good checkpoint at {checkpoint}"
        super().__init__(term, detail)
        self.term = term
        self.step = step
        self.checkpoint = checkpoint


class ProtocolError(DF2AMError):
    """The retrieval protocol is violated (e.g. a query has no true match)."""


class CheckpointError(DF2AMError):
    """A checkpoint cannot be read or does not fit the requested config."""


class OptimizerStateError(DF2AMError):
    """Optimizer state no longer matches the parameters it tracks."""
