"""Exception types shared across the package."""


class PolargateError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(PolargateError):
    """Tensor shapes are incompatible for the requested operation."""


class GraphInvariantError(PolargateError):
    """A network graph violates a structural invariant."""


class ConfigError(PolargateError):
    """Invalid configuration value or hyperparameter."""


class NumericsError(PolargateError):
    """A numerical contract was violated (non-finite loss, bad domain)."""
