"""Exception hierarchy shared by every qtlab module.

The CLI maps :class:`QtlabError` subclasses to exit code 1; anything else is
treated as a bug.
"""


class QtlabError(Exception):
    """Base class for all domain errors raised by qtlab."""


class DomainError(QtlabError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class DimensionError(QtlabError, ValueError):
    """Tensor shapes do not agree."""


class DataError(QtlabError, ValueError):
    """Input data is empty or contains non-finite values."""


class DegenerateInputError(QtlabError, ValueError):
    """Statistics collapse to a single value (zero range or zero spread)."""


class DegenerateActivationError(DegenerateInputError):
    """An observer site produced an activation with zero standard deviation."""

    def __init__(self, site_id, message=None):
        self.site_id = site_id
        super().__init__(message or f"activation at site {site_id!r} has zero standard deviation")


class ConfigurationError(QtlabError, ValueError):
    """A configuration, checkpoint or spec map is inconsistent."""


class StateError(QtlabError, RuntimeError):
    """An object is used before it has been prepared (e.g. not calibrated)."""


class TrainingDiverged(QtlabError, RuntimeError):
    """The loss became non-finite; carries the last good checkpoint."""

    def __init__(self, step, checkpoint, log):
        self.step = step
        self.checkpoint = checkpoint
        self.log = log
        super().__init__(f"loss became non-finite at step {step}")


class StageError(QtlabError, RuntimeError):
    """Wraps a failure inside a pipeline stage with the stage's name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
