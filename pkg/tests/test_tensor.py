import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from speaker_naming.exceptions import DimensionError, NumericalError
from speaker_naming.tensor import as_tensor, finite_diff_grad, matmul, relative_error


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_known_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b), [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    x = np.random.default_rng(0).normal(size=(2, 5))
    np.testing.assert_array_equal(matmul(np.eye(2), x), x)
    np.testing.assert_array_equal(matmul(np.zeros((3, 2)), x), np.zeros((3, 5)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
       st.integers(0, 2**32 - 1))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert relative_error(left, right) < 1e-9


def test_as_tensor_rejects_nonfinite_and_bad_shape():
    with pytest.raises(NumericalError):
        as_tensor([1.0, np.nan])
    with pytest.raises(DimensionError):
        as_tensor(np.arange(6), (4, 2))
    t = as_tensor(np.arange(6), (2, 3))
    assert t.dtype == np.float64 and t.flags.c_contiguous and t.shape == (2, 3)


def test_finite_diff_of_sum_is_ones():
    x = np.random.default_rng(2).normal(size=(3, 4))
    np.testing.assert_allclose(finite_diff_grad(np.sum, x), np.ones((3, 4)), atol=1e-9)


def test_finite_diff_square_at_three():
    g = finite_diff_grad(lambda v: float(v[0] ** 2), np.array([3.0]), h=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


@pytest.mark.parametrize("h", [1e-1, 1e-3, 1e-5])
def test_finite_diff_exact_for_affine(h):
    rng = np.random.default_rng(3)
    w, x = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(finite_diff_grad(lambda v: float(w @ v + 2.0), x, h), w,
                               atol=1e-9)


def test_finite_diff_raises_on_nonfinite():
    with pytest.raises(NumericalError), np.errstate(invalid="ignore"):
        finite_diff_grad(lambda v: float(np.log(v[0])), np.array([0.0]), h=1e-3)


def test_finite_diff_does_not_mutate_input():
    x = np.array([1.0, 2.0])
    finite_diff_grad(np.sum, x)
    np.testing.assert_array_equal(x, [1.0, 2.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_finite_diff_second_order_convergence(seed):
    # A cubic term makes the central-difference error O(h^2); halving h cuts it ~4x.
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 4))
    c = rng.uniform(0.5, 2.0, 4)
    x = rng.normal(size=4)

    def f(v):
        return float(v @ a @ v + c @ v ** 3)

    exact = (a + a.T) @ x + 3 * c * x ** 2
    e1 = np.linalg.norm(finite_diff_grad(f, x, 1e-2) - exact)
    e2 = np.linalg.norm(finite_diff_grad(f, x, 5e-3) - exact)
    assert e1 / e2 >= 3.0


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_relative_error_bounds(a):
    assert relative_error(a, a) == 0.0
    assert 0.0 <= relative_error(a, -a) <= 2.0


def test_relative_error_zero_tensors():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
