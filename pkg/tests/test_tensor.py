import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camseg import tensor as T


def naive_conv(x, w, b, stride, padding):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                s = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = s
    return out


def naive_maxpool(x, window, stride):
    c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.empty((c, ho, wo))
    for k in range(c):
        for i in range(ho):
            for j in range(wo):
                out[k, i, j] = max(x[k, i * stride + u, j * stride + v] for u in range(window) for v in range(window))
    return out


# -- conv --------------------------------------------------------------------------

def test_conv_identity_pixel():
    out = T.conv2d_forward(np.array([[[5.0]]]), np.ones((1, 1, 1, 1)), np.zeros(1))
    assert out.tolist() == [[[5.0]]]


def test_conv_sum_of_ones():
    out = T.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.tolist() == [[[9.0]]]


def test_conv_matches_naive(rng):
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(T.conv2d_forward(x, w, b), naive_conv(x, w, b, 1, 0), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    c_in=st.integers(1, 4), c_out=st.integers(1, 4), k=st.integers(1, 4),
    stride=st.integers(1, 4), padding=st.integers(0, 4), extra=st.integers(0, 5),
    seed=st.integers(0, 2**31),
)
def test_conv_naive_property(c_in, c_out, k, stride, padding, extra, seed):
    r = np.random.default_rng(seed)
    size = max(k - 2 * padding, 1) + extra
    x = r.standard_normal((c_in, size, size))
    w = r.standard_normal((c_out, c_in, k, k))
    b = r.standard_normal(c_out)
    got = T.conv2d_forward(x, w, b, stride, padding)
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), rtol=1e-10, atol=1e-10)


def test_conv_output_size_formula(rng):
    x = rng.standard_normal((1, 11, 9))
    out = T.conv2d_forward(x, rng.standard_normal((3, 1, 3, 2)), np.zeros(3), stride=2, padding=1)
    assert out.shape == (3, (11 + 2 - 3) // 2 + 1, (9 + 2 - 2) // 2 + 1)


def test_conv_shape_errors(rng):
    with pytest.raises(T.ShapeError, match="channels"):
        T.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(T.ShapeError, match="larger"):
        T.conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_conv_backward_zero_upstream(rng):
    x, w = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    dx, dw, db = T.conv2d_backward(x, w, np.zeros((3, 3, 3)))
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_backward_identity_kernel(rng):
    x, up = rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 4, 4))
    dx, _, _ = T.conv2d_backward(x, np.ones((1, 1, 1, 1)), up)
    np.testing.assert_array_equal(dx, up)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_backward_finite_differences(rng, stride, padding):
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    up = rng.standard_normal(T.conv2d_forward(x, w, b, stride, padding).shape)
    dx, dw, db = T.conv2d_backward(x, w, up, stride, padding)
    loss = lambda: float(np.sum(T.conv2d_forward(x, w, b, stride, padding) * up))  # noqa: E731
    assert T.finite_difference_check(lambda _: loss(), x, dx) <= 1e-5
    assert T.finite_difference_check(lambda _: loss(), w, dw) <= 1e-5
    assert T.finite_difference_check(lambda _: loss(), b, db) <= 1e-5


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 7, 7))
    w, b = rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)
    batched = T.conv2d_forward(x, w, b, 1, 1)
    for n in range(3):
        np.testing.assert_allclose(batched[n], T.conv2d_forward(x[n], w, b, 1, 1), rtol=1e-12)


# -- relu / pool -------------------------------------------------------------------

def test_relu():
    x = np.array([-1.0, 0.0, 2.0])
    assert T.relu_forward(x).tolist() == [0, 0, 2]
    assert T.relu_backward(x, np.ones(3)).tolist() == [0, 0, 1]


def test_relu_finite_differences(rng):
    x = rng.standard_normal(50)
    x[np.abs(x) < 1e-2] = 0.5  # stay away from the kink
    up = rng.standard_normal(50)
    assert T.finite_difference_check(lambda v: float(np.sum(T.relu_forward(v) * up)), x,
                                     T.relu_backward(x, up)) <= 1e-5


def test_maxpool_basic():
    assert T.maxpool_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2).tolist() == [[[4.0]]]


def test_maxpool_ties_route_to_top_left():
    x = np.ones((1, 4, 4))
    dx = T.maxpool_backward(x, np.full((1, 2, 2), 3.0), 2)
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = 3.0
    np.testing.assert_array_equal(dx, expected)


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1), (3, 2)])
def test_maxpool_matches_naive(rng, window, stride):
    x = rng.standard_normal((3, 7, 8))
    np.testing.assert_array_equal(T.maxpool_forward(x, window, stride), naive_maxpool(x, window, stride))


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1)])
def test_maxpool_finite_differences(rng, window, stride):
    x = rng.standard_normal((2, 6, 6))  # distinct values: no ties
    up = rng.standard_normal(T.maxpool_forward(x, window, stride).shape)
    dx = T.maxpool_backward(x, up, window, stride)
    f = lambda v: float(np.sum(T.maxpool_forward(v, window, stride) * up))  # noqa: E731
    assert T.finite_difference_check(f, x, dx, eps=1e-6) <= 1e-5


def test_maxpool_window_too_large():
    with pytest.raises(T.ShapeError):
        T.maxpool_forward(np.zeros((1, 2, 2)), 3)


# -- GAP -----------------------------------------------------------------------------

def test_gap_mean():
    assert T.gap_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]])).tolist() == [2.5]
    assert T.gap_forward(np.full((2, 3, 3), 7.25)).tolist() == [7.25, 7.25]


def test_gap_matches_naive_mean(rng):
    f = rng.standard_normal((3, 5, 7))
    naive = [sum(f[k, i, j] for i in range(5) for j in range(7)) / 35 for k in range(3)]
    np.testing.assert_allclose(T.gap_forward(f), naive, rtol=1e-9)


def test_gap_backward_cancels_area():
    np.testing.assert_array_equal(T.gap_backward(np.array([12.0]), 3, 4), np.ones((1, 3, 4)))
    assert not T.gap_backward(np.zeros(2), 3, 4).any()


def test_gap_backward_one_hot_sums_to_one():
    g = T.gap_backward(np.array([0.0, 1.0, 0.0]), 5, 7)
    assert math.isclose(g.sum(), 1.0, rel_tol=1e-12)
    assert g[1].sum() == pytest.approx(1.0) and not g[0].any()


def test_gap_finite_differences(rng):
    f = rng.standard_normal((3, 4, 5))
    up = rng.standard_normal(3)
    err = T.finite_difference_check(lambda v: float(T.gap_forward(v) @ up), f, T.gap_backward(up, 4, 5))
    assert err <= 1e-9


def test_gap_empty():
    with pytest.raises(T.ShapeError):
        T.gap_forward(np.zeros((2, 0, 3)))


# -- dense / loss ---------------------------------------------------------------

def test_dense_identity_and_zero(rng):
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(T.dense_forward(x, np.eye(4), np.zeros(4)), x)
    b = rng.standard_normal(3)
    np.testing.assert_array_equal(T.dense_forward(x, np.zeros((3, 4)), b), b)


def test_dense_finite_differences(rng):
    x, w, b = rng.standard_normal(5), rng.standard_normal((3, 5)), rng.standard_normal(3)
    up = rng.standard_normal(3)
    dx, dw, db = T.dense_backward(x, w, up)
    f = lambda _: float(T.dense_forward(x, w, b) @ up)  # noqa: E731
    for arr, grad in ((x, dx), (w, dw), (b, db)):
        assert T.finite_difference_check(f, arr, grad) <= 1e-5


def test_dense_shape_error():
    with pytest.raises(T.ShapeError):
        T.dense_forward(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


def test_softmax_ce_symmetric():
    loss, grad = T.softmax_cross_entropy(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(math.log(2))
    np.testing.assert_allclose(grad, [-0.5, 0.5])


def test_softmax_ce_stable():
    loss, grad = T.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_softmax_ce_finite_differences(rng):
    z = rng.standard_normal(2)
    _, g = T.softmax_cross_entropy(z, 1)
    assert T.finite_difference_check(lambda v: T.softmax_cross_entropy(v, 1)[0], z, g) <= 1e-6


def test_softmax_ce_label_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(np.zeros(2), 2)


# -- finite differences -------------------------------------------------------------

def test_fd_quadratic():
    x = np.array([1.0, 2.0])
    assert T.finite_difference_check(lambda v: float(np.sum(v**2)), x, np.array([2.0, 4.0])) <= 1e-8


def test_fd_linear_exact():
    a = np.array([0.5, -2.0, 3.0])
    x = np.array([1.0, 1.0, 1.0])
    assert T.finite_difference_check(lambda v: float(a @ v), x, a) <= 1e-10


def test_precision_modes(monkeypatch):
    assert T.precision_dtype("double") == np.float64
    monkeypatch.setenv("CAMSEG_PRECISION", "double")
    assert T.precision_dtype() == np.float64
    monkeypatch.delenv("CAMSEG_PRECISION")
    assert T.precision_dtype() == np.float32
    with pytest.raises(ValueError):
        T.precision_dtype("half")


def test_forward_ops_are_pure(rng):
    x, w, b = rng.standard_normal((2, 9, 9)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    a = T.conv2d_forward(x, w, b, 1, 1)
    assert T.conv2d_forward(x, w, b, 1, 1).tobytes() == a.tobytes()
