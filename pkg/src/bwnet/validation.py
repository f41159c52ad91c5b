"""Input validation helpers shared by the solver and the net engine."""

from __future__ import annotations

import numpy as np


def as_float_matrix(name: str, arr, ndim: int = 2) -> np.ndarray:
    """Coerce to a finite float64 array with the given rank."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ValueError(f"{name}: contains non-finite values")
    return out


def as_vector(name: str, arr) -> np.ndarray:
    return as_float_matrix(name, arr, ndim=1)


def check_codes(name: str, arr) -> np.ndarray:
    """Validate a -1/+1 code vector or matrix, returned as float64."""
    out = np.asarray(arr, dtype=np.float64)
    if out.size and not np.isin(out, (-1.0, 1.0)).all():
        raise ValueError(f"{name}: codes must be -1 or +1")
    return out


def check_consistent(x_tilde: np.ndarray, s_col: np.ndarray, b_col: np.ndarray) -> None:
    s_dim, m = x_tilde.shape
    if s_col.shape != (m,):
        raise ValueError(f"target column has shape {s_col.shape}, expected ({m},)")
    if b_col.shape != (s_dim,):
        raise ValueError(f"code column has shape {b_col.shape}, expected ({s_dim},)")


def check_finite_scalar(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name}: non-finite value {value}")
    return value
