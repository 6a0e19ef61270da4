"""Input validation helpers shared by the estimators and the free functions."""
from __future__ import annotations

from numbers import Real

import numpy as np


def check_spacing(spacing, name="spacing"):
    """Return ``spacing`` as a float tuple of length 3, all strictly positive."""
    if isinstance(spacing, Real):
        spacing = (spacing,) * 3
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"{name} must be strictly positive, got {spacing}")
    return spacing


def check_shape3(shape, name="shape"):
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),) * 3
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"{name} must be 3 positive integers, got {shape}")
    return shape


def check_array3d(data, name="data", finite=True, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3D array, got ndim={arr.ndim}")
    if finite and arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(*arrays, names=None):
    shapes = [tuple(np.shape(a)) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"shape mismatch between {label}: {shapes}")
    return shapes[0]


def check_binary_mask(mask, name="mask", allow_empty=True):
    arr = np.asarray(mask)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        arr = arr.astype(bool)
    if not allow_empty and not arr.any():
        raise ValueError(f"{name} is empty")
    return arr


def check_mode(mode):
    if mode not in ("linear", "nearest"):
        raise ValueError(f"mode must be 'linear' or 'nearest', got {mode!r}")
    return mode


def check_positive(value, name):
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be > 0, got {value}")
    return value
