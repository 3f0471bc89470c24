import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lgbpn import tensor as T
from lgbpn.tensor import Tap, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# conv2d ------------------------------------------------------------------


def test_conv2d_identity_tap():
    x = t64(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, t64(np.ones((1, 1, 1))), [Tap(0, 0)])
    assert np.array_equal(y.data, np.ones((1, 1, 3, 3)))


def test_conv2d_all_masked_is_zero():
    rng = np.random.default_rng(0)
    taps = [Tap(dy, dx, False) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    y = T.conv2d(t64(rng.standard_normal((2, 3, 5, 5))), t64(rng.standard_normal((4, 3, 9))), taps)
    assert np.array_equal(y.data, np.zeros((2, 4, 5, 5)))


def test_conv2d_four_neighbour_mean_of_ramp():
    i, j = np.mgrid[0:5, 0:5]
    x = t64((i + j)[None, None])
    taps = [Tap(0, 1), Tap(0, -1), Tap(1, 0), Tap(-1, 0)]
    y = T.conv2d(x, t64(np.full((1, 1, 4), 0.25)), taps)
    assert np.allclose(y.data[0, 0, 1:-1, 1:-1], (i + j)[1:-1, 1:-1], atol=1e-12)


def test_conv2d_zero_padding_at_border():
    x = t64(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, t64(np.ones((1, 1, 1))), [Tap(0, 1)])
    assert np.array_equal(y.data[0, 0, :, -1], [0, 0, 0])
    assert np.array_equal(y.data[0, 0, :, :-1], np.ones((3, 2)))


def test_conv2d_stride_output_size():
    x = t64(np.zeros((1, 1, 7, 8)))
    y = T.conv2d(x, t64(np.ones((1, 1, 1))), [Tap(0, 0)], stride=3)
    assert y.shape == (1, 1, 3, 3)


def test_conv2d_fractional_tap_is_bilinear():
    x = t64(np.arange(25.0).reshape(1, 1, 5, 5))
    y = T.conv2d(x, t64(np.ones((1, 1, 1))), [Tap(2, 0, True, -0.5, 0.0)])
    # offset 1.5 rows: average of rows r+1 and r+2
    assert y.data[0, 0, 1, 2] == pytest.approx((x.data[0, 0, 2, 2] + x.data[0, 0, 3, 2]) / 2)


def test_conv2d_errors():
    x = t64(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="footprint"):
        T.conv2d(x, t64(np.zeros((1, 2, 1))), [Tap(3, 0)], footprint=5)
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(x, t64(np.zeros((1, 3, 1))), [Tap(0, 0)])
    bad = np.zeros((1, 2, 4, 4))
    bad[0, 0, 1, 1] = np.nan
    with pytest.raises(T.NonFiniteError):
        T.conv2d(t64(bad), t64(np.zeros((1, 2, 1))), [Tap(0, 0)])


def _masked_taps():
    return [Tap(dy, dx, (dy, dx) not in ((0, 0), (0, 1), (0, -1))) for dy in (-2, 0, 2) for dx in (-1, 0, 1)]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), py=st.integers(0, 5), px=st.integers(0, 5))
def test_conv2d_ignores_masked_positions(seed, py, px):
    rng = np.random.default_rng(seed)
    taps = _masked_taps()
    x = rng.standard_normal((1, 2, 6, 6))
    w = t64(rng.standard_normal((3, 2, len(taps))))
    y0 = T.conv2d(t64(x), w, taps).data[0, :, py, px]
    x2 = x.copy()
    for t in taps:
        qy, qx = py + t.dy, px + t.dx
        if not t.mask and 0 <= qy < 6 and 0 <= qx < 6:
            x2[0, :, qy, qx] += rng.standard_normal(2) * 100
    y1 = T.conv2d(t64(x2), w, taps).data[0, :, py, px]
    assert np.array_equal(y0, y1)


def test_conv2d_masked_weight_grad_exactly_zero():
    rng = np.random.default_rng(1)
    taps = _masked_taps()
    w = Tensor(rng.standard_normal((3, 2, len(taps))).astype(np.float32), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)).astype(np.float32), requires_grad=True)
    T.backward(T.sum_all(T.relu(T.conv2d(x, w, taps))))
    masked = [k for k, t in enumerate(taps) if not t.mask]
    assert np.all(w.grad[:, :, masked] == 0.0)
    assert np.any(w.grad[:, :, [k for k in range(len(taps)) if k not in masked]] != 0)


# depthwise ---------------------------------------------------------------


def test_depthwise_k1_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    y = T.depthwise_conv2d(t64(x), t64(np.ones((3, 1, 1, 1))), 1)
    assert np.array_equal(y.data, x)


def test_depthwise_impulse_response_dilated():
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1
    y = T.depthwise_conv2d(t64(x), t64(np.ones((1, 1, 3, 3))), 3, dilation=2).data[0, 0]
    expected = {(4 + 2 * a, 4 + 2 * b) for a in (-1, 0, 1) for b in (-1, 0, 1)}
    assert set(zip(*np.nonzero(y))) == expected


def test_depthwise_box_constant_interior_and_border():
    c = 0.7
    y = T.depthwise_conv2d(t64(np.full((1, 1, 5, 5), c)), t64(np.full((1, 1, 3, 3), 1 / 9)), 3).data[0, 0]
    assert np.allclose(y[1:-1, 1:-1], c)
    # zero padding: corners see 4 of 9 taps, edges 6 of 9
    assert y[0, 0] == pytest.approx(c * 4 / 9)
    assert y[0, 2] == pytest.approx(c * 6 / 9)


def test_depthwise_errors():
    x = t64(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        T.depthwise_conv2d(x, t64(np.zeros((2, 1, 2, 2))), 2)
    with pytest.raises(ValueError):
        T.depthwise_conv2d(x, t64(np.zeros((2, 1, 3, 3))), 3, dilation=0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.integers(0, 3))
def test_depthwise_never_mixes_channels(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 6, 6))
    w = t64(rng.standard_normal((4, 1, 3, 3)))
    y0 = T.depthwise_conv2d(t64(x), w, 3, 2).data
    x[0, c] += rng.standard_normal((6, 6))
    y1 = T.depthwise_conv2d(t64(x), w, 3, 2).data
    other = [k for k in range(4) if k != c]
    assert np.array_equal(y0[0, other], y1[0, other])


# matmul / softmax / layer norm ----------------------------------------------


def test_matmul_cases():
    M = t64([[[1.0, 2.0], [3.0, 4.0]]])
    assert np.array_equal(T.matmul(t64(np.eye(2)[None]), M).data, M.data)
    assert np.array_equal(T.matmul(M, t64([[[5.0, 6.0], [7.0, 8.0]]])).data, [[[19.0, 22.0], [43.0, 50.0]]])
    assert np.array_equal(T.matmul(t64(np.zeros((1, 2, 2))), M).data, np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        T.matmul(M, t64(np.zeros((1, 3, 2))))


def test_softmax_closed_forms():
    assert np.allclose(T.softmax(t64(np.zeros((1, 4)))).data, 0.25)
    assert np.allclose(T.softmax(t64([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]])
    with pytest.raises(ValueError):
        T.softmax(t64(np.zeros((2, 2))), axis=2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(x, c):
    y = T.softmax(t64(x)).data
    assert np.all(y >= 0) and np.all(np.isfinite(y))
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert np.allclose(T.softmax(t64(x + c)).data, y, atol=1e-9)


def test_layer_norm_constant_channels_gives_zero():
    y = T.layer_norm(t64(np.full((1, 4, 2, 2), 3.0))).data
    assert np.allclose(y, 0.0)


def test_layer_norm_two_channels_closed_form():
    a, b = 0.3, -0.5
    y = T.layer_norm(t64(np.array([a, b]).reshape(1, 2, 1, 1))).data.ravel()
    d = (a - b) / 2
    expect = d / math.sqrt(d * d + T.LN_EPS)
    assert np.allclose(y, [expect, -expect], atol=1e-12)


def test_layer_norm_channel_mean_small():
    x = np.random.default_rng(3).standard_normal((2, 8, 3, 3)).astype(np.float32) * 5 + 2
    y = T.layer_norm(Tensor(x), Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32))).data
    assert np.abs(y.mean(axis=1)).max() < 1e-6


# elementwise -----------------------------------------------------------------


def test_elementwise_values():
    assert T.gelu(t64(np.zeros((1, 1, 1, 1)))).data.item() == 0.0
    assert T.mul(t64([2.0]), t64([3.0])).data.item() == 6.0
    assert T.l1_mean(t64([1.0, -1.0, 3.0]), t64(np.zeros(3))).data.item() == pytest.approx(5 / 3)
    with pytest.raises(ValueError):
        T.add(t64(np.zeros(2)), t64(np.zeros(3)))


def test_gelu_tanh_close_to_erf():
    x = np.linspace(-6, 6, 1001)
    exact = 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
    assert np.abs(T.gelu(t64(x)).data - exact).max() < 1e-3


def test_l1_subgradient_zero_at_ties():
    a = t64([1.0, 2.0], grad=True)
    T.backward(T.l1_mean(a, t64([1.0, 0.0])))
    assert np.array_equal(a.grad, [0.0, 0.5])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 4, 3, 3), elements=st.floats(-1e3, 1e3)))
def test_ops_finite_on_bounded_inputs(x):
    X = t64(x)
    outs = [T.gelu(X), T.relu(X), T.layer_norm(X), T.softmax(X, 1),
            T.depthwise_conv2d(X, t64(np.ones((4, 1, 3, 3))), 3, 2),
            T.conv2d(X, t64(np.ones((2, 4, 9))), T.grid_taps(3, 2)),
            T.pd_down(X, 2), T.pd_up(T.pd_down(X, 3), 3, (3, 3))]
    for o in outs:
        assert np.all(np.isfinite(o.data))


# backward --------------------------------------------------------------------


def test_backward_sum_and_square():
    x = t64(np.arange(6.0).reshape(1, 1, 2, 3), grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones_like(x.data))
    x.grad = None
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_shared_inputs():
    x = t64([1.0, 2.0], grad=True)
    T.backward(T.sum_all(T.add(T.mul(x, x), x)))
    assert np.array_equal(x.grad, 2 * x.data + 1)


def test_backward_rejects_non_scalar_and_cycles():
    x = t64(np.ones(3), grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.scale(x, 2.0))
    a = T.scale(x, 1.0)
    b = T.scale(a, 1.0)
    a._parents = (b,)
    with pytest.raises(RuntimeError, match="cycle"):
        T.backward(T.sum_all(b))


def test_backward_flags_non_finite_loss():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(T.NonFiniteError):
        T.backward(T.sum_all(T.scale(x, float("inf"))))


def test_topo_order_producers_first():
    x = t64([1.0], grad=True)
    a = T.scale(x, 2.0)
    b = T.add(a, x)
    c = T.mul(b, a)
    order = T.topo_order(c)
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert len(order) == len({id(n) for n in order})


def test_composite_conv_softmax_l1_matches_finite_differences():
    rng = np.random.default_rng(0)
    taps = _masked_taps()
    target = rng.standard_normal((1, 3, 4, 4))

    def fn(v):
        y = T.conv2d(v[0], v[1], taps)
        return T.l1_mean(T.softmax(y, axis=1), Tensor(target))

    err = T.grad_check(fn, [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, len(taps)))])
    assert err < 1e-5


# grad_check --------------------------------------------------------------------


def test_grad_check_linear_graph_is_exact():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((2, 2, 9))
    P = rng.standard_normal((1, 2, 5, 5))
    err = T.grad_check(lambda v: T.dot_const(T.conv2d(v[0], Tensor(w), T.grid_taps(3)), P),
                       [rng.standard_normal((1, 2, 5, 5))], h=1.0)
    assert err <= 1e-10


def test_grad_check_catches_wrong_rule():
    def bad_square(a):
        return T.from_op(a.data * a.data, (a,), lambda g: (3.0 * a.data * g,), "bad_square")

    err = T.grad_check(lambda v: T.sum_all(bad_square(v[0])), [np.array([0.5, -1.5, 2.0])])
    assert err > 1e-2


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_families_at_random_points(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 5, 5))
    P = rng.standard_normal((1, 3, 5, 5))
    taps = [Tap(2 * dy, 2 * dx, (dy, dx) != (0, 0), -0.6 * 2 * dy, -0.6 * 2 * dx)
            for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    w = rng.standard_normal((3, 3, 9))
    fams = {
        "conv": lambda v: T.dot_const(T.conv2d(v[0], v[1], taps), P),
        "depthwise": lambda v: T.dot_const(T.depthwise_conv2d(v[0], Tensor(np.ones((3, 1, 3, 3))), 3, 2), P),
        "layer_norm": lambda v: T.dot_const(T.layer_norm(v[0]), P),
        "softmax": lambda v: T.dot_const(T.softmax(v[0], axis=1), P),
        "gelu": lambda v: T.dot_const(T.gelu(v[0]), P),
        "pd": lambda v: T.dot_const(T.pd_up(T.gelu(T.pd_down(v[0], 2)), 2, (5, 5)), P),
    }
    for name, fn in fams.items():
        pt = [x, w] if name == "conv" else [x]
        assert T.grad_check(fn, pt, max_entries=15, seed=seed) < 1e-5, name


# pd ------------------------------------------------------------------------------


def test_pd_down_known_entries():
    x = t64((4 * np.arange(4)[:, None] + np.arange(4)[None, :])[None, None])
    y = T.pd_down(x, 2).data
    assert y.shape == (4, 1, 2, 2)
    assert np.array_equal(y[0, 0], [[0, 2], [8, 10]])
    assert np.array_equal(y[1, 0], [[1, 3], [9, 11]])
    assert np.array_equal(y[2, 0], [[4, 6], [12, 14]])
    assert np.array_equal(y[3, 0], [[5, 7], [13, 15]])


@settings(max_examples=40, deadline=None)
@given(s=st.integers(1, 5), h=st.integers(5, 13), w=st.integers(5, 13), seed=st.integers(0, 1000))
def test_pd_roundtrip_exact(s, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, h, w)).astype(np.float32)
    y = T.pd_up(T.pd_down(Tensor(x), s), s, (h, w)).data
    assert np.array_equal(y, x)


def test_pd_errors_and_constant():
    with pytest.raises(ValueError):
        T.pd_down(t64(np.zeros((1, 1, 4, 4))), 0)
    with pytest.raises(ValueError):
        T.pd_up(t64(np.zeros((3, 1, 2, 2))), 2)
    assert np.all(T.pd_down(t64(np.full((1, 2, 4, 4), 0.3)), 2).data == 0.3)


def test_pd_up_gradient_is_pd_down():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((4, 1, 3, 3)), grad=True)
    G = rng.standard_normal((1, 1, 6, 6))
    T.backward(T.dot_const(T.pd_up(x, 2), G))
    assert np.array_equal(x.grad, T.pd_down(t64(G), 2).data)
