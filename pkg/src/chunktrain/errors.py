"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class ResidencyError(RuntimeError):
    """A page was read or written while not resident in the device tier."""


class StateError(RuntimeError):
    """An operation was called out of its required order."""
