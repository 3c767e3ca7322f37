"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A call violated a documented precondition."""


class ConfigError(ValueError):
    """Invalid model, training or run configuration."""


class FormatError(ValueError):
    """A dataset or checkpoint file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LoadError(ValueError):
    """A checkpoint does not match the model it is loaded into."""


class NumericalError(FloatingPointError):
    """A loss or activation became non-finite."""
