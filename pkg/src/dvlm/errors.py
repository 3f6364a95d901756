class DomainError(ValueError):
    """A time fraction or other scalar argument is outside its valid range."""


class InvalidInputError(ValueError):
    """Input data violates an operation's preconditions."""


class ConfigError(ValueError):
    """An infeasible or malformed configuration."""


class CapacityError(ValueError):
    """Sequence does not fit in the model context."""


class CacheMismatchError(RuntimeError):
    """A KV cache was used with an incompatible attention plan."""


class NonFiniteLossError(FloatingPointError):
    pass
