"""Input validation helpers for array-facing entry points."""

from __future__ import annotations

import numpy as np


def check_image_batch(X, name="X"):
    """Coerce to a float32 (n, 3, H, W) batch with square spatial dims."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n, channels, H, W), got {X.shape}")
    n, c, h, w = X.shape
    if h != w:
        raise ValueError(f"{name} must be square, got {h}x{w}")
    if not np.issubdtype(X.dtype, np.floating):
        raise ValueError(f"{name} must be a float array of values in [0, 1], got dtype {X.dtype}")
    return np.ascontiguousarray(X, dtype=np.float32)


def check_mask_batch(y, images, classes, name="y"):
    """Coerce to an int64 (n, H, W) batch aligned with an image batch."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"{name} must have shape (n, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.issubdtype(y.dtype, np.floating) and np.all(y == np.rint(y)):
            y = y.astype(np.int64)
        else:
            raise ValueError(f"{name} must hold integer class ids, got dtype {y.dtype}")
    y = y.astype(np.int64, copy=False)
    n, c, h, w = images.shape
    if y.shape != (n, h, w):
        raise ValueError(f"{name} shape {y.shape} does not match images {(n, h, w)}")
    if y.min() < 0 or y.max() >= classes:
        raise ValueError(
            f"{name} has class ids outside [0, {classes}): range [{y.min()}, {y.max()}]"
        )
    return np.ascontiguousarray(y)


def check_divisible(size, divisor, name):
    if size % divisor:
        raise ValueError(f"{name} of {size} pixels must be divisible by {divisor}")
