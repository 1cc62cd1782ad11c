"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid dimensions."""


class ParameterError(ValueError):
    """A parameter is outside its documented domain."""


class StateError(RuntimeError):
    """An operation was called in an inconsistent order (e.g. backward with
    a different mask than the preceding forward)."""


class ConfigError(ParameterError):
    """An experiment config document is malformed."""


class InvariantError(RuntimeError):
    """An internal invariant was violated; indicates a bug, not user error."""
