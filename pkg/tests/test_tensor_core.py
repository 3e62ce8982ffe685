import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from treebp import tensor_core as tc
from treebp.exceptions import ShapeError
from treebp.tensor_core import Activation


def loop_conv_grouped(x, filters):
    c, h, w = x.shape
    k = filters.shape[1]
    out = np.zeros((c * k, h - 4, w - 4))
    for ch in range(c):
        for kk in range(k):
            for i in range(h - 4):
                for j in range(w - 4):
                    out[ch * k + kk, i, j] = np.sum(filters[ch, kk] * x[ch, i:i + 5, j:j + 5])
    return out


def test_grouped_conv_shape_cifar():
    x = np.zeros((3, 32, 32), np.float32)
    assert tc.conv2d_grouped(x, np.zeros((3, 6, 5, 5), np.float32), groups=3).shape == (18, 28, 28)


def test_grouped_conv_delta_filter_is_identity(rng):
    x = rng.normal(size=(3, 9, 9))
    f = np.zeros((3, 2, 5, 5))
    f[:, :, 0, 0] = 1
    out = tc.conv2d_grouped(x, f)
    for c in range(3):
        for k in range(2):
            np.testing.assert_array_equal(out[c * 2 + k], x[c, :5, :5])


def test_grouped_conv_constant_input():
    out = tc.conv2d_grouped(np.full((1, 8, 8), 0.5), np.ones((1, 3, 5, 5)))
    np.testing.assert_allclose(out, 12.5)


def test_grouped_conv_matches_loops(rng):
    x = rng.normal(size=(3, 11, 10))
    f = rng.normal(size=(3, 4, 5, 5))
    np.testing.assert_allclose(tc.conv2d_grouped(x, f), loop_conv_grouped(x, f), rtol=1e-12, atol=1e-12)


def test_grouped_conv_errors_name_dimension():
    with pytest.raises(ShapeError) as e:
        tc.conv2d_grouped(np.zeros((3, 32, 32)), np.zeros((2, 6, 5, 5)))
    assert e.value.dimension == "C"
    with pytest.raises(ShapeError) as e:
        tc.conv2d_grouped(np.zeros((3, 32, 32)), np.zeros((3, 6, 5, 5)), groups=1)
    assert e.value.dimension == "groups"
    with pytest.raises(ShapeError) as e:
        tc.conv2d_grouped(np.zeros((3, 4, 32)), np.zeros((3, 6, 5, 5)))
    assert e.value.dimension == "H"
    with pytest.raises(ShapeError):
        tc.conv2d_grouped(np.zeros((3, 8, 8)), np.zeros((3, 6, 3, 3)))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_grouped_conv_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 2, 7, 7))
    f = r.normal(size=(2, 3, 5, 5))
    lhs = tc.conv2d_grouped(a * x + b * y, f)
    rhs = a * tc.conv2d_grouped(x, f) + b * tc.conv2d_grouped(y, f)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


def test_full_conv_shape_and_bias():
    out = tc.conv2d_full(np.ones((6, 14, 14)), np.zeros((16, 6, 5, 5)), bias=np.arange(16.0))
    assert out.shape == (16, 10, 10)
    for f in range(16):
        assert np.all(out[f] == f)


def test_full_conv_self_dot(rng):
    x = rng.normal(size=(1, 5, 5))
    out = tc.conv2d_full(x, x[None])
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx(float(np.sum(x ** 2)), rel=1e-12)


def test_full_conv_backward_matches_numeric(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    f = rng.normal(size=(4, 3, 5, 5))
    b = rng.normal(size=4)
    g = rng.normal(size=(2, 4, 4, 4))
    dx, df, db = tc.conv2d_full_backward(x, f, g)

    def loss(x_, f_, b_):
        return float(np.sum(tc.conv2d_full(x_, f_, b_) * g))

    eps = 1e-6
    for arr, grad in ((x, dx), (f, df), (b, db)):
        for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(5)]:
            old = arr[idx]
            arr[idx] = old + eps
            lp = loss(x, f, b)
            arr[idx] = old - eps
            lm = loss(x, f, b)
            arr[idx] = old
            assert grad[idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-6, abs=1e-8)


def test_maxpool_shape_and_window():
    assert tc.maxpool2x2(np.zeros((18, 28, 28))).output.shape == (18, 14, 14)
    t = tc.maxpool2x2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert t.output[0, 0, 0] == 4 and t.argmax[0, 0, 0] == 3


def test_maxpool_constant_ties_lowest_index():
    t = tc.maxpool2x2(np.full((2, 4, 6), 7.0))
    assert np.all(t.output == 7.0)
    assert np.all(t.argmax == 0)


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError) as e:
        tc.maxpool2x2(np.zeros((1, 5, 4)))
    assert e.value.dimension == "H"


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 6), elements=st.integers(-3, 3).map(float)))
def test_maxpool_argmax_addresses_window_max(x):
    t = tc.maxpool2x2(x)
    back = tc.maxpool2x2_backward(np.ones_like(t.output), t.argmax)
    # one unit of sensitivity per window, placed on a maximal element
    assert back.sum() == t.output.size
    for c in range(2):
        for i in range(2):
            for j in range(3):
                win = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                a = t.argmax[c, i, j]
                assert win[a // 2, a % 2] == win.max()
                flat = win.ravel()
                assert a == int(np.flatnonzero(flat == flat.max())[0])
                assert back[c, 2 * i + a // 2, 2 * j + a % 2] == 1


def test_dense_forward_examples():
    assert tc.dense_forward(np.ones(336), np.ones((336, 10))).shape == (10,)
    x = np.arange(4.0)
    np.testing.assert_array_equal(tc.dense_forward(x, np.eye(4)), x)
    np.testing.assert_array_equal(tc.dense_forward(np.array([1.0, 2.0]),
                                                   np.array([[3.0, 4.0], [5.0, 6.0]])), [13, 16])
    with pytest.raises(ShapeError):
        tc.dense_forward(np.ones(3), np.ones((4, 2)))


def test_softmax_xent_uniform():
    loss, d = tc.softmax_xent(np.zeros(10), 3)
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert d.sum() == pytest.approx(0, abs=1e-12)


def test_softmax_xent_saturation():
    logits = np.zeros(10)
    logits[4] = 1000.0
    loss, d = tc.softmax_xent(logits, 4)
    assert loss == pytest.approx(0, abs=1e-12)
    np.testing.assert_allclose(d, 0, atol=1e-12)


def test_softmax_xent_high_precision_oracle():
    getcontext().prec = 50
    one = Decimal(1)
    expected = (one.exp() + 9).ln() - one
    logits = np.zeros(10)
    logits[0] = 1.0
    loss, _ = tc.softmax_xent(logits, 0)
    assert loss == pytest.approx(float(expected), rel=1e-14)


def test_softmax_xent_label_range():
    with pytest.raises(ValueError):
        tc.softmax_xent(np.zeros(10), 10)
    with pytest.raises(ValueError):
        tc.softmax_xent(np.zeros(10), -1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 10, elements=st.floats(-50, 50)), st.integers(0, 9))
def test_softmax_xent_properties(logits, label):
    loss, d = tc.softmax_xent(logits, label)
    assert loss >= 0
    assert abs(d.sum()) < 1e-6


def test_batched_softmax_xent_is_mean(rng):
    logits = rng.normal(size=(4, 10))
    labels = np.array([0, 3, 9, 2])
    loss, d = tc.softmax_xent(logits, labels)
    singles = [tc.softmax_xent(logits[i], labels[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(d, np.stack([s[1] for s in singles]) / 4)


def test_activation_definitions():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(Activation.RELU(x), [0, 0, 3])
    np.testing.assert_array_equal(Activation.RELU.derivative(x), [0, 0, 1])
    s = 1 / (1 + np.exp(-x))
    np.testing.assert_allclose(Activation.SIGMOID(x), s, rtol=1e-15)
    np.testing.assert_allclose(Activation.SIGMOID.derivative(x), s * (1 - s), rtol=1e-14)
    assert Activation.parse("ReLU") is Activation.RELU
    with pytest.raises(ValueError):
        Activation.parse("tanh")
