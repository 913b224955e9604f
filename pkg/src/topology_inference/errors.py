from typing import Optional

import numpy as np


class TopologyInferenceError(Exception):
    """Base class for every error raised by the topology inference package."""


class ModelConstructionError(TopologyInferenceError):
    """The graph signal model cannot be built (e.g. singular I - A)."""


class SamplingError(TopologyInferenceError):
    """
    The implicit nonlinear model could not be inverted for a noise draw.
    The offending draw is kept on the exception for reproduction.
    """

    def __init__(self, message: str, noise: Optional[np.ndarray] = None):
        super().__init__(message)
        self.noise = None if noise is None else np.array(noise, dtype=float)


class DimensionMismatchError(TopologyInferenceError, ValueError):
    """Operand shapes do not agree."""


class InvalidHyperparameterError(TopologyInferenceError, ValueError):
    """A step size, weight, forgetting factor or similar is out of range."""


class DivergenceError(TopologyInferenceError):
    """A recursion produced non-finite values."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class MomentComputationError(TopologyInferenceError):
    """Closed-form moment evaluation failed, usually from ill-conditioning."""

    def __init__(self, message: str, condition_number: Optional[float] = None):
        if condition_number is not None:
            message = f"{message} (condition number {condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number


class NotPositiveSemidefiniteError(TopologyInferenceError, ValueError):
    """A matrix expected to be PSD has a clearly negative eigenvalue."""


class InstabilityError(TopologyInferenceError):
    """The steady-state operator has spectral radius >= 1."""

    def __init__(self, message: str, spectral_radius: float):
        super().__init__(f"{message} (spectral radius {spectral_radius:.6f})")
        self.spectral_radius = spectral_radius


class ConfigError(TopologyInferenceError):
    """The experiment configuration is missing a key or holds a bad value."""


class StageError(TopologyInferenceError):
    """Wraps any failure inside a labelled pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
