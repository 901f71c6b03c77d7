import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixerflow import linalg
from mixerflow.errors import DimensionError


@settings(max_examples=40)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_lu_reconstructs_row_permuted_input(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    lu, perm, _ = linalg.lu_factor(a)
    l = np.tril(lu, -1) + np.eye(n)
    u = np.triu(lu)
    np.testing.assert_allclose(l @ u, a[perm], atol=1e-10)


@settings(max_examples=40)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_slogdet_agrees_with_numpy(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    sign, ld = linalg.slogdet(a)
    ref_sign, ref_ld = np.linalg.slogdet(a)
    assert sign == ref_sign
    assert abs(ld - ref_ld) < 1e-10


def test_slogdet_singular_and_diagonal():
    assert linalg.slogdet(np.zeros((3, 3))) == (0.0, -np.inf)
    sign, ld = linalg.slogdet(np.diag([2.0, 0.5, -1.0]))
    assert sign == -1.0 and abs(ld) < 1e-15


def test_triangular_solves():
    rng = np.random.default_rng(2)
    l = np.tril(rng.standard_normal((5, 5)), -1) + np.eye(5)
    u = np.triu(rng.standard_normal((5, 5))) + 3 * np.eye(5)
    b = rng.standard_normal((5, 3))
    np.testing.assert_allclose(l @ linalg.solve_lower_unit(l, b), b, atol=1e-12)
    np.testing.assert_allclose(u @ linalg.solve_upper(u, b), b, atol=1e-12)


def test_non_square_rejected():
    with pytest.raises(DimensionError):
        linalg.lu_factor(np.ones((2, 3)))
