"""Exception hierarchy shared by all modules."""


class VSMDError(Exception):
    """Base class for library errors."""


class InvalidArgumentError(VSMDError, ValueError):
    pass


class SingularKernelError(VSMDError, ArithmeticError):
    """Block-exponential denominator H_t is numerically singular."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class DecompositionError(VSMDError, ArithmeticError):
    pass


class SingularMatrixError(VSMDError, ArithmeticError):
    pass


class FeasibilityError(VSMDError, ValueError):
    """A variational schedule violates 1 - 2*gamma*a_x >= eps or 1 - 2*a_v >= eps."""

    def __init__(self, message, node=None, coord=None):
        super().__init__(message)
        self.node = node
        self.coord = coord


class NumericalError(VSMDError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    """A sampler or training loop produced runaway states."""

    def __init__(self, message, step=None, h=None):
        super().__init__(message)
        self.step = step
        self.h = h


class ConfigError(VSMDError, ValueError):
    pass


class CheckpointError(VSMDError):
    pass


class HashMismatchError(CheckpointError, ConfigError):
    """Checkpoint was produced under a different model configuration."""
