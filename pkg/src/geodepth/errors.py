"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class EmptyInputError(ValueError):
    """An operation received an input with no usable elements."""


class ContractError(RuntimeError):
    """API misuse: a precondition on call order or state was violated."""


class DataFormatError(ValueError):
    """An on-disk artifact does not follow its documented format."""
