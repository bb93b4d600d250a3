"""Momentum diffusion with variational linear scores: kernels, samplers, training and evaluation."""
__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CheckpointError,
    ConfigError,
    DivergenceError,
    FeasibilityError,
    InvalidArgumentError,
    NumericalError,
    VSMDError,
)
from .processes import DiffusionConfig, Mode, VariationalSchedule, build_kernel  # noqa: F401
