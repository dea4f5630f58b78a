"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, min_size: int = 16, multiple_of: int = 1, name: str = "X") -> np.ndarray:
    """Coerce ``X`` to a finite float64 array of shape (n, H, W).

    A single 2-D image is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must be (n, H, W) images, got shape {X.shape}")
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True, input_name=name)
    h, w = X.shape[1:]
    if h < min_size or w < min_size:
        raise ValueError(f"{name} images must be at least {min_size}x{min_size}, got {h}x{w}")
    if h % multiple_of or w % multiple_of:
        raise ValueError(f"{name} image sides must be multiples of {multiple_of}, got {h}x{w}")
    return X


def check_dose_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != n:
        raise ValueError(f"expected {n} dose labels, got {y.size}")
    if np.any(~np.isfinite(y)) or np.any(y <= 0) or np.any(y > 1):
        raise ValueError("dose labels must be fractions in (0, 1]")
    return y


def check_pair(X, Y, min_size: int = 16, multiple_of: int = 1) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, min_size, multiple_of, "X")
    Y = check_images(Y, min_size, multiple_of, "y")
    if X.shape != Y.shape:
        raise ValueError(f"X {X.shape} and y {Y.shape} must have the same shape")
    return X, Y
