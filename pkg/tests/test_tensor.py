import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tokenmerge import tensor as T


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        assert np.array_equal(T.matmul(eye, eye), eye)

    def test_orthogonal(self):
        assert T.matmul(np.array([[1.0, 0.0]]), np.array([[0.0], [1.0]])).tolist() == [[0.0]]

    def test_matches_triple_loop(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_batch_broadcast(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        out = T.matmul(a, b)
        for i in range(2):
            np.testing.assert_allclose(out[i], naive_matmul(a[i], b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner extents"):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_identity_associativity(self, rng):
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 3))
        np.testing.assert_allclose(T.matmul(T.matmul(a, np.eye(6)), b), T.matmul(a, b), atol=1e-12)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.elementwise("sigmoid", np.array(0.0)) == 0.5

    def test_sigmoid_half(self):
        assert T.elementwise("sigmoid", np.array(0.5)) == pytest.approx(1 / (1 + math.exp(-0.5)), abs=1e-15)
        assert float(T.elementwise("sigmoid", np.array(0.5))) == pytest.approx(0.622459, abs=1e-6)

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(np.array([-1000.0, 1000.0]))
        assert out.tolist() == [0.0, 1.0]

    def test_relu(self):
        assert T.elementwise("relu", np.array([-3.0, 3.0])).tolist() == [0.0, 3.0]

    def test_binary_and_scale(self):
        a = np.array([1.0, 2.0])
        assert T.elementwise("add", a, a).tolist() == [2.0, 4.0]
        assert T.elementwise("scale", a, 3.0).tolist() == [3.0, 6.0]
        with pytest.raises(ValueError):
            T.elementwise("add", a, np.ones(3))

    def test_div_by_zero_is_inf(self):
        out = T.elementwise("div", np.array([1.0, -1.0]), np.array([0.0, 0.0]))
        assert out.tolist() == [np.inf, -np.inf]
        assert not T.all_finite(out)


class TestReduce:
    def test_max_tie_lowest_index(self):
        val, idx = T.reduce("max", np.array([0.2, 0.9, 0.9]))
        assert val == 0.9 and idx == 1

    def test_mean(self):
        assert T.reduce("mean", np.array([1.0, 2.0, 3.0])) == 2.0

    def test_sum_loop_oracle(self, rng):
        x = rng.normal(size=(4, 4))
        for axis in (0, 1):
            loop = np.zeros(4)
            for i in range(4):
                for j in range(4):
                    loop[j if axis == 0 else i] += x[i, j]
            np.testing.assert_allclose(T.reduce("sum", x, axis), loop, atol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(ValueError, match="empty"):
            T.reduce("sum", np.zeros((3, 0)), axis=1)


class TestTopk:
    def test_basic(self):
        v, i = T.topk(np.array([0.1, 0.7, 0.4]), 2)
        assert v.tolist() == [0.7, 0.4] and i.tolist() == [1, 2]

    def test_tie_break(self):
        _, i = T.topk(np.array([5.0, 5.0, 1.0]), 2)
        assert i.tolist() == [0, 1]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            T.topk(np.zeros(3), 4)

    def test_sort_oracle(self, rng):
        x = rng.normal(size=64)
        v, i = T.topk(x, 10)
        ref = sorted(range(64), key=lambda j: (-x[j], j))[:10]
        assert i.tolist() == ref
        assert np.array_equal(T.gather(x, i), v)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.integers(-3, 3).map(float)), st.data())
    def test_topk_gather_is_stable_sort_prefix(self, x, data):
        k = data.draw(st.integers(0, len(x)))
        v, i = T.topk(x, k)
        order = np.argsort(-x, kind="stable")[:k]
        assert i.tolist() == order.tolist()
        assert np.array_equal(T.gather(x, i), v)


class TestGatherScatter:
    def test_gather_rows(self):
        t = np.array([["a"], ["b"]], dtype=object)
        assert T.gather_scatter(t, [1, 0], "gather").tolist() == [["b"], ["a"]]

    def test_scatter_twice(self):
        x = np.array([[1.5, -2.0]])
        out = T.gather_scatter(np.zeros((1, 2)), [0, 0], "scatter-add", values=np.concatenate([x, x]))
        assert out.tolist() == [[3.0, -4.0]]

    def test_scatter_loop_oracle(self, rng):
        idx = rng.integers(0, 5, size=12)
        vals = rng.normal(size=(12, 3))
        ref = np.zeros((5, 3))
        for k, j in enumerate(idx):
            ref[j] += vals[k]
        np.testing.assert_allclose(T.scatter_add(np.zeros((5, 3)), idx, vals), ref, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather(np.zeros((2, 1)), [2])
        with pytest.raises(IndexError):
            T.scatter_add(np.zeros((2, 1)), [-1], np.zeros((1, 1)))


def test_rng_reproducible():
    a = T.make_rng(42).normal(size=8)
    b = T.make_rng(42).normal(size=8)
    assert a.tobytes() == b.tobytes()
    assert T.RNG_ALGORITHM == "PCG64"
