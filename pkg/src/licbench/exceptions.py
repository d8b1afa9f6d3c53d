"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat
and unambiguous: one class per failure family.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's preconditions (non-scalar loss,
    degenerate domain, empty dataset, ...)."""


class ConfigError(ValueError):
    """Invalid experiment or attack configuration."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class ModelFileError(Exception):
    """Base for model (de)serialization failures."""


class ModelVersionError(ModelFileError):
    """Model file has an unsupported format_version."""


class ModelParseError(ModelFileError):
    """Model file is not valid JSON or misses required fields."""


class ModelShapeError(ModelFileError):
    """Parameter values in a model file do not match their declared shape."""
