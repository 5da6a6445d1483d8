"""Exception types shared by the models and services."""


class CmpToolkitError(Exception):
    """Base class for every error raised by the toolkit."""
    pass


class GeometryError(CmpToolkitError):
    """Exception raised for invalid or degenerate geometry."""
    pass


class ConfigError(CmpToolkitError):
    """Exception raised for invalid parameter values or configuration."""
    pass


class ContractViolation(CmpToolkitError):
    """Exception raised when a caller breaks a precondition (halo width, alignment)."""
    pass
