"""Exception hierarchy shared across the package."""


class TerViTError(Exception):
    """Base class for all errors raised by tervit."""


class DimensionError(TerViTError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TerViTError, RuntimeError):
    """An API precondition was violated."""


class FormatError(TerViTError, ValueError):
    """Malformed packed codes, checkpoint or dataset file."""


class ConfigError(TerViTError, ValueError):
    """Invalid configuration or quantization policy.

    ``key`` names the offending configuration key when there is one.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class TrainingDivergedError(TerViTError, FloatingPointError):
    """Loss became non-finite; ``dump`` describes the offending step."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump
