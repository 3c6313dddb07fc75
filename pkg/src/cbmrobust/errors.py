"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class NonFiniteError(ValueError):
    """An input contains NaN or infinite entries."""


class ParameterError(ValueError):
    """A scalar argument is out of its allowed range."""


class DegenerateDirectionError(RuntimeError):
    """Attack direction is undefined (identical weight rows / all-zero constraint matrix)."""


class MetricError(RuntimeError):
    """A robustness metric cannot be computed for the given inputs."""


class DataFormatError(ValueError):
    """A dataset or checkpoint file does not match the expected text format."""


class IngestError(RuntimeError):
    """Raw attribute files are missing or fail integrity checks."""


class TrainingDivergedError(RuntimeError):
    """A loss or parameter became non-finite during training."""
