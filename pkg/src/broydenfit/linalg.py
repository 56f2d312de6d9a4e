"""Dense symmetric linear solves for the damped normal equations.

The systems produced by the step assembly are small (n x n, with n the
parameter count), symmetric, and positive semi-definite plus damping, so a
pivoted LU factorization is ample.  What callers rely on is the contract,
not the factorization: a solution with a small relative residual for
well-conditioned inputs, and a :class:`SingularSystem` signal instead of a
garbage solution when a pivot collapses.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from .errors import SingularSystem

# A pivot this far below the largest one is treated as an exact zero.
PIVOT_RTOL = 1e-14


def _factor(a: np.ndarray):
    """LU-factor ``a``, raising SingularSystem on a collapsed pivot."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    with warnings.catch_warnings():
        # getrf flags exact zero pivots with a warning; the threshold check
        # below subsumes it.
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    pivots = np.abs(np.diag(lu))
    largest = pivots.max() if pivots.size else 0.0
    if largest == 0.0 or pivots.min() < PIVOT_RTOL * largest:
        raise SingularSystem(
            f"pivot ratio {0.0 if largest == 0.0 else pivots.min() / largest:.3e} "
            f"below {PIVOT_RTOL:.0e}"
        )
    return lu, piv


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric ``a``.

    Raises:
        SingularSystem: if a pivot falls below ``PIVOT_RTOL`` times the
            largest pivot magnitude (numerically rank deficient).
    """
    b = np.asarray(b, dtype=float)
    lu, piv = _factor(a)
    x = scipy.linalg.lu_solve((lu, piv), b)
    if not np.all(np.isfinite(x)):
        raise SingularSystem("solution overflowed; system effectively singular")
    return x


def condition_estimate(a: np.ndarray) -> float:
    """1-norm condition number of ``a``; ``inf`` when singular.

    Computed as ||a||_1 * ||a^-1||_1 from the LU factors, which is exact up
    to round-off and therefore comfortably within the factor-of-n accuracy
    the diagnostics need.
    """
    a = np.asarray(a, dtype=float)
    try:
        lu, piv = _factor(a)
    except SingularSystem:
        return float("inf")
    inv = scipy.linalg.lu_solve((lu, piv), np.eye(a.shape[0]))
    anorm = np.abs(a).sum(axis=0).max()
    invnorm = np.abs(inv).sum(axis=0).max()
    return float(anorm * invnorm)
