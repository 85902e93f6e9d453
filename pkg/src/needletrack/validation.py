"""Input validation helpers shared across the package.

All contract failures raise :class:`ContractViolation` so callers (and the
CLI) can distinguish misuse from genuine runtime errors.
"""

import numpy as np


class ContractViolation(ValueError):
    """An input violated a documented precondition."""


def require(cond, msg):
    if not cond:
        raise ContractViolation(msg)


def check_shape(arr, shape, name="array"):
    """Check an exact shape, with None acting as a wildcard extent."""
    actual = tuple(arr.shape)
    ok = len(actual) == len(shape) and all(
        e is None or e == a for e, a in zip(shape, actual)
    )
    if not ok:
        raise ContractViolation(f"{name}: expected shape {shape}, got {actual}")


def check_positive(value, name="value"):
    arr = np.asarray(value)
    if not np.all(arr > 0):
        raise ContractViolation(f"{name} must be strictly positive")


def check_index_inside(point, extent, name="point"):
    x, y = float(point[0]), float(point[1])
    h, w = extent
    if not (0 <= x < w and 0 <= y < h):
        raise ContractViolation(f"{name} ({x}, {y}) outside bounds {extent}")
