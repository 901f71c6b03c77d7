"""Independent reference computations used by the tests.

None of these call into the package under test.
"""
from __future__ import annotations

import math

import numpy as np


def erf_series(x: float, terms: int = 80) -> float:
    """Maclaurin series erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1)), in exact rationals."""
    from fractions import Fraction
    xf = Fraction(x).limit_denominator(10**12)
    total = Fraction(0)
    for n in range(terms):
        total += Fraction((-1) ** n) * xf ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return float(total) * 2.0 / math.sqrt(math.pi)


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + erf_series(x / math.sqrt(2.0)))


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def sum_axis0_loops(a: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape[1])
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[j] += a[i, j]
    return out


def jacobian_columns(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Jacobian of a map on one flat vector, one central-difference column at a time."""
    x = np.asarray(x, dtype=np.float64).ravel()
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.ravel(fn(x + e)) - np.ravel(fn(x - e))) / (2 * step))
    return np.stack(cols, axis=1)


def log_abs_det(m: np.ndarray) -> float:
    sign, ld = np.linalg.slogdet(m)
    assert sign != 0
    return float(ld)


def patchify_loops(img: np.ndarray, p_h: int, p_w: int) -> np.ndarray:
    """[ch, h, w] -> [n_patches, p_h*p_w*ch]: patches row-major, pixels row-major, channel fastest."""
    ch, h, w = img.shape
    rows = []
    for pr in range(h // p_h):
        for pc in range(w // p_w):
            row = []
            for r in range(p_h):
                for c in range(p_w):
                    for k in range(ch):
                        row.append(img[k, pr * p_h + r, pc * p_w + c])
            rows.append(row)
    return np.array(rows)


def two_stage_local_shuffle(img: np.ndarray, p_h: int, p_w: int,
                            slot_perm: np.ndarray, patch_perm: np.ndarray) -> np.ndarray:
    """Shuffle slots inside every patch with one shared pattern, then reorder whole patches."""
    ch, h, w = img.shape
    n_pc = w // p_w
    patches = patchify_loops(img, p_h, p_w)
    stage1 = patches[:, slot_perm]
    stage2 = stage1[patch_perm]
    out = np.empty_like(img)
    for j, row in enumerate(stage2):
        pr, pc = divmod(j, n_pc)
        q = 0
        for r in range(p_h):
            for c in range(p_w):
                for k in range(ch):
                    out[k, pr * p_h + r, pc * p_w + c] = row[q]
                    q += 1
    return out


def std_normal_logpdf(z: np.ndarray) -> np.ndarray:
    z = z.reshape(z.shape[0], -1)
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * math.log(2 * math.pi)
