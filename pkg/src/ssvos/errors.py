"""Exception types shared across the engine."""


class SSVOSError(Exception):
    """Base class for all engine errors."""


class ShapeError(SSVOSError, ValueError):
    """Operand extents are incompatible with the operation."""


class ContractError(SSVOSError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(SSVOSError, ValueError):
    """Invalid engine or memory configuration."""


class SpecError(SSVOSError, ValueError):
    """Invalid synthetic sequence specification."""


class InputError(SSVOSError, OSError):
    """Malformed or missing input files."""
