"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericError -> 2,
InvariantError -> 3.
"""


class DeltaNerfError(Exception):
    pass


class ShapeError(DeltaNerfError, ValueError):
    """Operand dimensions do not agree."""


class ContractError(DeltaNerfError):
    """A caller violated an operation precondition."""


class NumericError(DeltaNerfError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(DeltaNerfError):
    pass


class InvariantError(DeltaNerfError):
    """A hard invariant (e.g. frozen base immutability) was violated."""
