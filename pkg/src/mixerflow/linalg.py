"""Small dense linear algebra: partial-pivot LU, slogdet, triangular solves.

These back both the linear-block inverses and the independent log-determinant
oracle used when checking layers against a finite-difference Jacobian.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Doolittle LU with partial pivoting.

    Returns ``(lu, perm, n_swaps)`` where ``lu`` packs the unit-lower ``L``
    below the diagonal and ``U`` on/above it, and ``a[perm] == L @ U``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"LU needs a square matrix, got {a.shape}")
    n = a.shape[0]
    perm = np.arange(n)
    swaps = 0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            swaps += 1
        if a[k, k] == 0.0:
            continue
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    return a, perm, swaps


def slogdet(a: np.ndarray) -> tuple[float, float]:
    """Sign and log-absolute-determinant via :func:`lu_factor`."""
    lu, _, swaps = lu_factor(a)
    diag = np.diag(lu)
    if np.any(diag == 0.0):
        return 0.0, -np.inf
    sign = (-1.0) ** swaps * float(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


def solve_lower_unit(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``L x = b`` for unit-lower ``L``; ``b`` is ``[k, m]`` (columns are systems)."""
    k = l.shape[0]
    x = np.array(b, dtype=np.result_type(l, b))
    for i in range(1, k):
        x[i] -= l[i, :i] @ x[:i]
    return x


def solve_upper(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``U x = b`` for upper-triangular ``U`` by back substitution."""
    k = u.shape[0]
    x = np.array(b, dtype=np.result_type(u, b))
    for i in range(k - 1, -1, -1):
        if i + 1 < k:
            x[i] -= u[i, i + 1:] @ x[i + 1:]
        x[i] /= u[i, i]
    return x
