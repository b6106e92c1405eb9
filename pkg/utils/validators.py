"""Small argument checks shared across modules."""
import math

import numpy as np

from core.errors import GridMismatchError, NonFiniteFieldError


def require_same_grid(*fields):
    """Raise GridMismatchError unless every field lives on the same grid."""
    grids = [f.grid for f in fields]
    first = grids[0]
    for g in grids[1:]:
        if g != first:
            raise GridMismatchError(f"fields live on different grids: {first} vs {g}")
    return first


def require_finite(values, what="field"):
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise NonFiniteFieldError(f"{what} contains {bad} non-finite value(s)")


def require_subsonic(U):
    """0 <= U < 1; the delay kernel and its horizon are only used on the subsonic range."""
    if not math.isfinite(U) or U < 0.0 or U >= 1.0:
        raise ValueError(f"U must satisfy 0 <= U < 1 (subsonic only), got {U}")
    return float(U)


def require_nonnegative(value, name):
    if not math.isfinite(value) or value < 0.0:
        raise ValueError(f"{name} must be a finite number >= 0, got {value}")
    return float(value)


def require_positive(value, name):
    if not math.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be a finite number > 0, got {value}")
    return float(value)
