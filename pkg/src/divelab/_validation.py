import numbers

import numpy as np

from .errors import ArgumentError


def as_float_array(x, name="array", dtype=np.float64):
    arr = np.asarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite values")
    return arr


def check_images(images, shape=None, name="images"):
    """Coerce to a float64 batch of shape (n, 3, H, W).

    A single (3, H, W) image is promoted to a batch of one.
    """
    arr = as_float_array(images, name)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ArgumentError(f"{name} must have shape (n, 3, H, W), got {arr.shape}")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ArgumentError(f"{name} have shape {arr.shape[1:]}, expected {tuple(shape)}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ArgumentError(
            f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}"
        )


def check_indices(indices, n, name="indices"):
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.size == 0:
        raise ArgumentError(f"{name} must be a non-empty 1-d index set")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ArgumentError(f"{name} must be integers")
    if idx.min() < 0 or idx.max() >= n:
        raise ArgumentError(f"{name} out of range [0, {n})")
    return idx.astype(np.int64)


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ArgumentError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
