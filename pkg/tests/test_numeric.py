"""Numerical helpers against closed forms and scipy references."""

import json
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrbias.numeric import average_ranks, bce_loss, log1pexp, sigmoid, to_jsonable


class TestSigmoid:
    def test_matches_naive_form_in_safe_range(self):
        z = np.linspace(-30, 30, 401)
        naive = 1.0 / (1.0 + np.exp(-z))
        assert np.abs(sigmoid(z) - naive).max() < 1e-15

    def test_extreme_arguments_do_not_overflow(self):
        with np.errstate(over="raise"):
            assert sigmoid(800.0) == 1.0
            assert sigmoid(-800.0) == 0.0

    def test_scalar_in_scalar_out(self):
        out = sigmoid(0.0)
        assert isinstance(out, float)
        assert out == 0.5

    def test_symmetry(self):
        z = np.linspace(-20, 20, 101)
        assert np.abs(sigmoid(z) + sigmoid(-z) - 1.0).max() < 1e-15

    def test_monotone(self):
        z = np.linspace(-40, 40, 301)
        assert np.all(np.diff(sigmoid(z)) >= 0)


class TestLog1pExp:
    def test_matches_naive_form_in_safe_range(self):
        z = np.linspace(-30, 30, 401)
        assert np.abs(log1pexp(z) - np.log1p(np.exp(z))).max() < 1e-13

    def test_large_positive_is_identity(self):
        with np.errstate(over="raise"):
            assert log1pexp(1000.0) == pytest.approx(1000.0, abs=1e-12)

    def test_large_negative_is_zero(self):
        assert log1pexp(np.array([-1000.0]))[0] == 0.0


class TestBceLoss:
    def test_matches_probability_form(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=50) * 3
        labels = rng.integers(2, size=50).astype(float)
        p = sigmoid(logits)
        direct = -(labels * np.log(p) + (1 - labels) * np.log(1 - p))
        assert np.abs(bce_loss(logits, labels) - direct).max() < 1e-12

    def test_zero_logit_is_log_two(self):
        assert bce_loss(np.zeros(3), np.array([0, 1, 0]))[0] == pytest.approx(math.log(2))

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=100) * 10
        labels = rng.integers(2, size=100)
        assert (bce_loss(logits, labels) >= 0).all()

    def test_confident_correct_is_small_confident_wrong_is_large(self):
        assert bce_loss(np.array([20.0]), np.array([1]))[0] < 1e-8
        assert bce_loss(np.array([20.0]), np.array([0]))[0] > 19


class TestAverageRanks:
    def test_matches_scipy_on_mixed_ties(self):
        cases = [
            [3.0, 1.0, 2.0],
            [1.0, 1.0, 1.0],
            [2.0, 2.0, 1.0, 3.0, 3.0, 3.0],
            [5.0],
            [-1.0, -1.0, 0.0, 0.0, 0.0, 7.5],
            list(np.random.default_rng(2).normal(size=40)),
        ]
        for a in cases:
            expected = scipy.stats.rankdata(a, method="average")
            assert np.array_equal(average_ranks(np.asarray(a)), expected)

    def test_sum_of_ranks_is_triangular(self):
        a = np.random.default_rng(3).normal(size=25)
        assert average_ranks(a).sum() == pytest.approx(25 * 26 / 2)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(min_value=-5, max_value=5), min_size=1, max_size=30))
    def test_matches_scipy_on_integer_lists(self, xs):
        a = np.asarray(xs, dtype=np.float64)
        assert np.array_equal(average_ranks(a), scipy.stats.rankdata(a, method="average"))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                              min_value=-1e6, max_value=1e6),
                    min_size=1, max_size=30),
           st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, xs, pyrandom):
        a = np.asarray(xs, dtype=np.float64)
        perm = list(range(len(a)))
        pyrandom.shuffle(perm)
        perm = np.asarray(perm)
        assert np.array_equal(average_ranks(a[perm]), average_ranks(a)[perm])


class TestToJsonable:
    def test_numpy_types_become_plain_python(self):
        obj = {
            "arr": np.array([1.5, 2.5]),
            "int": np.int64(7),
            "float": np.float64(1.25),
            "bool": np.bool_(True),
            "nested": (np.array([1, 2]), {"x": np.float32(0.5)}),
        }
        out = to_jsonable(obj)
        assert out["arr"] == [1.5, 2.5]
        assert out["int"] == 7 and isinstance(out["int"], int)
        assert out["float"] == 1.25 and isinstance(out["float"], float)
        assert out["bool"] is True
        assert out["nested"] == [[1, 2], {"x": 0.5}]
        json.dumps(out)

    def test_nan_becomes_none(self):
        out = to_jsonable({"a": float("nan"), "b": np.array([1.0, np.nan])})
        assert out["a"] is None
        assert out["b"] == [1.0, None]

    def test_plain_values_pass_through(self):
        assert to_jsonable({"s": "x", "n": None, "i": 3}) == {"s": "x", "n": None, "i": 3}
