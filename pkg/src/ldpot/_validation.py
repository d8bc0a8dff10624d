"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import numpy as np


def check_points(X, name="X", ensure_2d=True) -> np.ndarray:
    """Return ``X`` as a finite float64 matrix of shape (n, d), n, d >= 1.

    One-dimensional input is read as n samples of dimension 1.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1 and ensure_2d:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and one column")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_weights(w, n: int | None = None, name="weights", atol=1e-12):
    """Validate a probability vector; ``None`` yields uniform weights of length n."""
    if w is None:
        if n is None:
            raise ValueError("either weights or a length is required")
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64).ravel()
    if n is not None and w.shape[0] != n:
        raise ValueError(f"{name} has length {w.shape[0]}, expected {n}")
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    if abs(w.sum() - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1 (got {w.sum():.17g})")
    return w


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value
