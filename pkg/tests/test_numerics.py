import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfbfuse.numerics import (Rng, ShapeError, dropout_mask, l2_normalize_rows, matmul, relu,
                              sigmoid, softmax_rows, xavier_init)
from oracles import matmul_loops, softmax_direct

finite = st.floats(-50, 50, allow_nan=False)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, np.eye(2)), a)


def test_matmul_row_by_column():
    np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11.0]])


def test_matmul_matches_triple_loop(nprng):
    a = nprng.normal(size=(5, 7))
    b = nprng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), matmul_loops(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"2x3.*2x2"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_softmax_cases():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 0.0]])), [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0],
                               softmax_direct([1.0, 2.0, 3.0]), atol=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    s = softmax_rows(x)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_sigmoid_values():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert sigmoid(np.array([1.0]))[0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    tiny = sigmoid(np.array([-1000.0]))[0]
    assert tiny >= 0.0 and not math.isnan(tiny)


def test_relu_cases():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(-np.ones((2, 2))), np.zeros((2, 2)))
    x = np.array([[0.5, 3.0]])
    np.testing.assert_array_equal(relu(x), x)


def test_l2_normalize_cases(nprng):
    np.testing.assert_allclose(l2_normalize_rows(np.array([[3.0, 4.0]]), eps=0.0), [[0.6, 0.8]])
    z = l2_normalize_rows(np.zeros((1, 4)), eps=1e-12)
    assert np.all(z == 0.0)
    row = nprng.normal(size=(1, 9))
    assert abs(np.sqrt(np.sum(l2_normalize_rows(row) ** 2)) - 1.0) < 1e-10


@settings(max_examples=50)
@given(arrays(np.float64, (2, 6), elements=finite))
def test_l2_normalize_is_idempotent(x):
    x[:, 0] += 1.0  # keep rows away from zero
    once = l2_normalize_rows(x)
    np.testing.assert_allclose(l2_normalize_rows(once), once, atol=1e-9)


def test_xavier_determinism_and_range():
    a = xavier_init(20, 30, Rng(5))
    b = xavier_init(20, 30, Rng(5))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a) <= math.sqrt(6.0 / 50))


def test_xavier_mean_statistical():
    x = xavier_init(1000, 1000, Rng(11))
    bound = math.sqrt(6.0 / 2000)
    sigma_of_mean = bound / math.sqrt(3.0) / math.sqrt(x.size)
    assert abs(x.mean()) < 3 * sigma_of_mean


def test_dropout_rate_zero_is_identity():
    np.testing.assert_array_equal(dropout_mask((4, 5), 0.0, Rng(0)), np.ones((4, 5)))


def test_dropout_zero_fraction():
    mask = dropout_mask((1000, 1000), 0.1, Rng(3))
    assert abs(np.mean(mask == 0.0) - 0.1) < 0.003
    assert set(np.unique(mask)) == {0.0, 1.0 / 0.9}


def test_dropout_expectation_is_identity():
    x = np.array([1.0, -2.0, 0.5, 3.0])
    trials = 4000
    mean = sum(dropout_mask(x.shape, 0.1, Rng(s)) * x for s in range(trials)) / trials
    # per-entry std of the mask is sqrt(rate / (1 - rate)) = 1/3
    np.testing.assert_allclose(mean, x, atol=4 * (1 / 3) / math.sqrt(trials) * np.abs(x).max())


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        dropout_mask((2,), 1.0, Rng(0))


def test_rng_reproducible_and_derive_independent():
    assert np.array_equal(Rng(42).normal(size=5), Rng(42).normal(size=5))
    assert not np.array_equal(Rng(42).normal(size=5), Rng(43).normal(size=5))
    parent = Rng(42)
    child_a = parent.derive(1).normal(size=3)
    child_b = parent.derive(1).normal(size=3)
    np.testing.assert_array_equal(child_a, child_b)
    assert not np.array_equal(child_a, parent.derive(2).normal(size=3))
