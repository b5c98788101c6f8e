"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or consumed."""


class ConditioningError(NumericError):
    """A matrix factorization failed even after jitter."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class ParameterizationError(ValueError):
    """Model parameters are outside their valid domain."""


class TrainingError(RuntimeError):
    """Training diverged."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs an artifact that was not produced."""
