"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or axes."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent."""


class ContractError(RuntimeError):
    """An operation was invoked outside its contract (e.g. non-scalar loss)."""


class NumericError(ArithmeticError):
    """A numeric failure (NaN/Inf) was detected during optimization."""


class WeightsFormatError(ValueError):
    """A weights file does not match the expected layout or configuration."""


class NiftiParseError(ValueError):
    """A NIfTI file could not be parsed; carries the offending byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset
