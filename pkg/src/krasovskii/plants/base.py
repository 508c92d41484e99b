"""Validation helpers shared by the plant models."""

from __future__ import annotations

import numpy as np


class InvariantViolation(ValueError):
    pass


class InfeasibleReference(ValueError):
    pass


def positive_vector(name: str, value, size: int | None = None) -> np.ndarray:
    """Diagonal parameter given as a vector (or a diagonal matrix); entries must be positive."""
    v = np.asarray(value, dtype=float)
    if v.ndim == 2:
        if np.any(v - np.diag(np.diag(v))):
            raise InvariantViolation(f"{name} must be diagonal")
        v = np.diag(v).copy()
    v = np.atleast_1d(v)
    if size is not None and v.size != size:
        raise InvariantViolation(f"{name} must have {size} entries, got {v.size}")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise InvariantViolation(f"{name} must be positive")
    return v


def vector(name: str, value, size: int) -> np.ndarray:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    if v.size != size:
        raise InvariantViolation(f"{name} must have {size} entries, got {v.size}")
    return v
