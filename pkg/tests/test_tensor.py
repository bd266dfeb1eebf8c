import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wisca.errors import DomainError, ShapeError
from wisca.tensor import (
    as_matrix,
    gaussian_fill,
    l1_norm,
    l2_norm,
    make_rng,
    matmul,
    norm_fn,
    row_softmax,
    softmax_last_axis,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_as_matrix_coerces_to_contiguous_float64():
    m = as_matrix(np.arange(6, dtype=np.int32).reshape(3, 2).T)
    assert m.dtype == np.float64 and m.flags.c_contiguous and m.shape == (2, 3)


@pytest.mark.parametrize("bad", [np.zeros(3), np.zeros((2, 2, 2))])
def test_as_matrix_rejects_non_2d(bad):
    with pytest.raises(ShapeError):
        as_matrix(bad)


def test_norms_against_loops():
    m = np.array([[1.0, -2.0], [3.0, -4.0]])
    assert l1_norm(m) == 10.0
    assert l2_norm(m) == math.sqrt(30.0)


def test_empty_norm_is_a_domain_error():
    with pytest.raises(DomainError):
        l1_norm(np.zeros((0, 3)))


def test_unknown_norm():
    with pytest.raises(DomainError):
        norm_fn("l3")


def test_matmul_checks_inner_dims():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert matmul(np.ones((2, 3)), np.ones((3, 4))).tolist() == [[3.0] * 4] * 2


@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_is_shift_invariant_and_normalized(z, shift):
    p = softmax_last_axis(z)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(softmax_last_axis(z + shift), p, rtol=1e-9, atol=1e-300)


def test_softmax_survives_huge_logits():
    p = row_softmax(np.array([[1e308, 1e308, -1e308]]))
    np.testing.assert_array_equal(p, [[0.5, 0.5, 0.0]])


def test_row_softmax_rejects_nan():
    with pytest.raises(DomainError):
        row_softmax(np.array([[0.0, np.nan]]))


def test_rng_is_reproducible():
    a = gaussian_fill(4, 4, 1.0, make_rng(3))
    b = gaussian_fill(4, 4, 1.0, make_rng(3))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DomainError):
        gaussian_fill(2, 2, 0.0, make_rng(0))


@settings(max_examples=25)
@given(st.floats(0.1, 10.0))
def test_gaussian_fill_scales_with_sigma(sigma):
    a = gaussian_fill(3, 3, 1.0, make_rng(1))
    b = gaussian_fill(3, 3, sigma, make_rng(1))
    np.testing.assert_allclose(b, sigma * a, rtol=1e-15)
