"""Exception types shared across the package.

Each error class marks one failure family so callers (and the CLI exit-code
mapping) can tell configuration mistakes apart from malformed data or
violated call contracts.
"""


class ShapeError(ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ConfigError(ValueError):
    """A configuration value or combination violates a build-time invariant."""


class ContractError(ValueError):
    """A caller violated an operation precondition at run time."""


class NumericError(ArithmeticError):
    """An operation on finite inputs produced NaN or infinity."""


class FormatError(ValueError):
    """A binary file is malformed; message includes the byte offset."""


class ParseError(ValueError):
    """A text file is malformed; message includes the line number."""


class CorruptionError(RuntimeError):
    """A checkpoint failed an integrity check; nothing was loaded."""
