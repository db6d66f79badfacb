"""Exception types shared across the package."""


class HeterRecError(Exception):
    """Base class for all package errors."""


class DataError(HeterRecError, ValueError):
    """Malformed, inconsistent or unsupported input data."""


class ConfigError(HeterRecError, ValueError):
    """Invalid hyperparameters or configuration files."""


class ShapeError(HeterRecError, ValueError):
    """Tensor extents do not line up."""


class InvalidMaskError(HeterRecError, ValueError):
    """An attention mask leaves a row with no admissible entry."""


class ContractError(HeterRecError, ValueError):
    """A caller violated an operation precondition."""


class TrainingDivergedError(HeterRecError, RuntimeError):
    """The training loss became non-finite."""
