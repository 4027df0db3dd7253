import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unorm.numkernel import (ShapeError, column_reduce, finite_difference_gradient, load_matrix,
                             make_rng, matmul, matrix_from_csv, matrix_to_csv, relative_error,
                             save_matrix)


def test_matmul_identity():
    np.testing.assert_array_equal(matmul([[1, 0], [0, 1]], [[5, 6], [7, 8]]), [[5, 6], [7, 8]])


def test_matmul_hand_value():
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


def test_matmul_dimension_error():
    with pytest.raises(ShapeError, match="mismatch"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
       st.integers(1, 6))
def test_matmul_associative(seed, p, q, r, s):
    rng = make_rng(seed)
    a, b, c = rng.normal(size=(p, q)), rng.normal(size=(q, r)), rng.normal(size=(r, s))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    # scale by the magnitude of the summed terms, not the (possibly cancelled) result
    scale = np.abs(a) @ np.abs(b) @ np.abs(c)
    assert np.max(np.abs(left - right) / scale) < 1e-10


def test_quadratic_mean_hand_value():
    assert column_reduce([[3.0], [4.0]], "quadratic_mean")[0] == 12.5


@pytest.mark.parametrize("kind", ["mean", "quadratic_mean", "variance"])
def test_zero_column(kind):
    assert column_reduce(np.zeros((5, 2)), kind).tolist() == [0.0, 0.0]


def test_constant_column_variance():
    assert column_reduce(np.full((7, 1), 3.3), "variance")[0] == pytest.approx(0.0, abs=1e-15)


def test_column_reduce_rejects_empty_and_unknown():
    with pytest.raises(ShapeError):
        column_reduce(np.zeros((0, 3)), "mean")
    with pytest.raises(ValueError):
        column_reduce(np.ones((2, 2)), "median")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3))
def test_quadratic_mean_scaling(seed, c):
    x = make_rng(seed).normal(size=(9, 4))
    q = column_reduce(x, "quadratic_mean")
    assert np.all(q >= 0)
    np.testing.assert_allclose(column_reduce(c * x, "quadratic_mean"), c * c * q, rtol=1e-12)


def test_fd_examples():
    g = finite_difference_gradient(lambda x: np.sum(x**2), [[1.0, 2.0]], 1e-5)
    np.testing.assert_allclose(g, [[2.0, 4.0]], rtol=1e-8)
    assert np.all(finite_difference_gradient(lambda x: 3.0, np.ones((2, 3))) == 0)
    g3 = finite_difference_gradient(lambda x: np.sum(x**3), [[2.0]])
    assert g3[0, 0] == pytest.approx(12.0, rel=1e-8)


@pytest.mark.parametrize("f,df", [
    (lambda x: np.sum(np.sin(x)), np.cos),
    (lambda x: np.sum(np.exp(0.3 * x)), lambda x: 0.3 * np.exp(0.3 * x)),
    (lambda x: np.sum(np.log1p(x * x)), lambda x: 2 * x / (1 + x * x)),
])
def test_fd_matches_closed_forms(f, df):
    x = make_rng(1).normal(size=(4, 3))
    assert relative_error(finite_difference_gradient(f, x, 1e-5), df(x)) < 1e-4


def test_fd_rejects_bad_inputs():
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda x: float("nan"), np.ones((1, 1)))
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda x: 0.0, np.ones((1, 1)), h=0.0)


def test_fd_does_not_mutate_input():
    x = np.arange(6.0).reshape(2, 3)
    before = x.copy()
    finite_difference_gradient(lambda v: np.sum(v**2), x)
    np.testing.assert_array_equal(x, before)


def test_rng_reproducible():
    assert np.array_equal(make_rng(7).random(10), make_rng(7).random(10))
    assert not np.array_equal(make_rng(7).random(10), make_rng(8).random(10))


def test_matrix_csv_roundtrip(tmp_path):
    x = make_rng(3).normal(size=(5, 3))
    text = matrix_to_csv(x)
    assert text.splitlines()[0] == "5,3"
    np.testing.assert_array_equal(matrix_from_csv(text), x)
    save_matrix(tmp_path / "m.csv", x)
    np.testing.assert_array_equal(load_matrix(tmp_path / "m.csv"), x)


def test_matrix_csv_rejects_bad_header():
    with pytest.raises(ValueError):
        matrix_from_csv("three,two\n1,2\n")
    with pytest.raises(ShapeError):
        matrix_from_csv("2,2\n1,2\n")
