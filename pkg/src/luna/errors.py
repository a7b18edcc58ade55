"""Exception types shared across the package."""


class LunaError(Exception):
    """Base class for all package errors."""


class DimensionError(LunaError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(LunaError, ValueError):
    """An option or configuration value is not supported."""


class ContractError(LunaError, ValueError):
    """A documented precondition of an operation does not hold."""


class InputError(LunaError, ValueError):
    """User-supplied data (token ids, lengths) is out of range."""
