"""Exception types raised across the package."""


class StreamVitError(Exception):
    """Base class for all package errors."""


class ShapeError(StreamVitError, ValueError):
    pass


class NonFiniteError(StreamVitError, FloatingPointError):
    pass


class DegenerateSliceError(StreamVitError, ValueError):
    """A softmax slice had every entry masked."""


class NormalizationError(StreamVitError, ValueError):
    """L2 normalization hit a vector whose norm is below the eps floor."""


class StateError(StreamVitError, RuntimeError):
    pass


class CapacityError(StreamVitError, RuntimeError):
    """Too many frames for the configured temporal position table."""


class UsageError(StreamVitError, ValueError):
    pass


class ConfigError(StreamVitError, ValueError):
    pass


class InputError(StreamVitError, ValueError):
    pass


class SpecError(StreamVitError, ValueError):
    """A synthetic scene cannot be realised at the requested resolution."""


class CheckpointError(StreamVitError, ValueError):
    """Malformed checkpoint or container file.

    ``line`` is the 1-based manifest line where parsing failed, when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(StreamVitError, RuntimeError):
    def __init__(self, task: str, step: int, value: float):
        self.task = task
        self.step = step
        self.value = value
        super().__init__(f"non-finite {task} loss ({value}) at step {step}")
