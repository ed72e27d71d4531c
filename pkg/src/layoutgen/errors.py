"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
OSError -> 4 (everything else is a plain crash).
"""


class LayoutError(ValueError):
    """A layout, mask, or relation structure violates its invariants."""


class DegenerateInputError(LayoutError):
    """An operation received an input it cannot meaningfully process."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during training or sampling."""


class AlreadyMergedError(RuntimeError):
    """merge() called on a model whose adapters were already folded in."""
