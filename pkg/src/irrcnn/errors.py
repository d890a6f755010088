"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class IrrcnnError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(IrrcnnError, ValueError):
    """An operand has an incompatible shape; the message names the offending dimension."""


class ConfigError(IrrcnnError, ValueError):
    """A configuration document or spec object is invalid."""


class DataError(IrrcnnError, ValueError):
    """A dataset, manifest, image, or checkpoint is missing or malformed."""


class NumericError(IrrcnnError, ArithmeticError):
    """A numeric invariant failed: non-finite values, divergence, or a gradient-check failure."""
