"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

Every public entry point funnels user arrays through one of these so the
numerical code below can assume contiguous float64 arrays of the right
shape.
"""

import numbers

import numpy as np


def check_points(points, dim=3, name="points", min_count=0):
    """Return ``points`` as a float64 array of shape ``(n, dim)``."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == dim:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have shape (n, {dim}), got {arr.shape}")
    if arr.shape[0] < min_count:
        raise ValueError(f"{name} needs at least {min_count} rows, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_weights(weights, n, name="weights"):
    """Validate a nonnegative weight vector of length ``n``.

    ``None`` means unit weights.
    """
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"{name} has length {w.shape[0]}, expected {n}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    return w


def check_depth(depth, name="depth"):
    """Return a depth map as a 2-D float64 array with values >= 0."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    return d


def check_rotation(rotation, atol=1e-9):
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r @ r.T, np.eye(3), rtol=0.0, atol=atol):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > atol:
        raise ValueError("rotation must have determinant +1")
    return r


def check_probability(value, name):
    if not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be a probability in [0, 1], got {value!r}")
    return float(value)


def check_nonnegative(value, name):
    if not isinstance(value, numbers.Real) or not value >= 0.0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"{label} must share a shape, got {shapes}")
