"""
Text Formatting Utilities

This module renders numeric objects as plain text for logs and dumps:
1. format_matrix: row-major decimal dump of a matrix (debugging format)
2. format_interval: "[lo, hi]" with infinite ends spelled out
"""

import math

import numpy as np


def format_matrix(matrix, digits: int = 17) -> str:
    """
    Render a matrix as plain-text rows of decimal entries, row-major.

    Entries are separated by a single space and rows by newlines, so the
    dump can be read back with numpy.loadtxt.

    Example:
        >>> print(format_matrix([[0.5, 1.0], [0.5, 0.0]], digits=3))
        0.5 1
        0.5 0
    """
    arr = np.atleast_2d(np.asarray(matrix, dtype=float))
    return "\n".join(" ".join(f"{v:.{digits}g}" for v in row) for row in arr)


def format_interval(lo: float | None, hi: float | None, digits: int = 4) -> str:
    """Format a bracket such as an s0 interval for summaries."""

    def one(v):
        # None: that end was never bracketed
        if v is None:
            return "?"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.{digits}f}"

    return f"[{one(lo)}, {one(hi)}]"
