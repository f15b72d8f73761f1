"""
Numeric Validation Utilities

Small predicates shared by the services:
1. is_finite_nonnegative: entrywise check for matrices and vectors
2. is_probability_vector: weights/probabilities that sum to one
3. is_substochastic: feedback vectors (entries >= 0, sum <= 1)
"""

import numpy as np


def is_finite_nonnegative(values) -> bool:
    """
    Check that every entry is finite and >= 0.

    Args:
        values: Array-like (matrix, vector or scalar)

    Returns:
        True if all entries are finite and nonnegative
    """
    arr = np.asarray(values, dtype=float)
    return bool(np.all(np.isfinite(arr)) and np.all(arr >= 0.0))


def is_probability_vector(weights, tol: float = 1e-12, strict: bool = True) -> bool:
    """
    Check that weights form a probability vector.

    Args:
        weights: Sequence of weights
        tol: Allowed deviation of the sum from 1
        strict: Require every weight to be > 0 (finite-support atoms)

    Examples:
        >>> is_probability_vector([0.5, 0.5])
        True
        >>> is_probability_vector([1.0, 0.0])
        False
    """
    arr = np.asarray(weights, dtype=float)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        return False
    # Atoms of a finite-support law must carry positive weight
    if strict and np.any(arr <= 0.0):
        return False
    if not strict and np.any(arr < 0.0):
        return False
    return abs(float(arr.sum()) - 1.0) <= tol


def is_substochastic(gamma, tol: float = 1e-12) -> bool:
    """True if every entry is >= 0 and the entries sum to at most 1 (+tol)."""
    arr = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
        return False
    return float(arr.sum()) <= 1.0 + tol
