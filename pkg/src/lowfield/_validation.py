"""Input validation helpers shared by the estimators and functional API."""

import numbers

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}


class SingularityError(ValueError):
    """Evaluation at a dipole source or division by a vanishing gradient."""


class RankDeficiencyError(ValueError):
    """Sample set does not determine a full linear model."""


class EncodingHoleError(SingularityError):
    """Encoding field has no variation along the requested axis."""


class TimingError(ValueError):
    """Pulse or readout timing is inconsistent."""


class DivergenceError(RuntimeError):
    """Iterative solver produced a non-finite residual."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = [] if history is None else list(history)


class FormatError(ValueError):
    """Malformed FMAP / SIGDAT header or payload."""


def axis_index(axis):
    if isinstance(axis, numbers.Integral):
        if 0 <= int(axis) < 3:
            return int(axis)
    elif isinstance(axis, str) and axis.lower() in AXES:
        return AXES[axis.lower()]
    raise ValueError(f"axis must be one of x, y, z or 0..2, got {axis!r}")


def check_vector3(v, name="vector"):
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def check_points(points, name="points"):
    """Return ``points`` as a float array of shape (n, 3)."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def check_positive(value, name, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if allow_zero:
        if value < 0:
            raise ValueError(f"{name} must be >= 0, got {value!r}")
    elif value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    return float(value)


def check_finite_array(values, name="values", dtype=float):
    arr = np.asarray(values, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_grid(*maps):
    first = maps[0].grid
    for m in maps[1:]:
        if not first.matches(m.grid):
            raise ValueError(f"grid mismatch between {maps[0].label!r} and {m.label!r}")
    return first
