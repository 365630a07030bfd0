"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(ValueError):
    """Runtime input (tokens, masks, splits) violates a precondition."""


class ContractError(RuntimeError):
    """An API contract was violated (e.g. backward called twice)."""
