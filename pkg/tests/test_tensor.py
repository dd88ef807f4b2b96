import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import numeric_grad, rel_err
from msinet.tensor import (
    Graph,
    GraphCycleError,
    Node,
    ShapeError,
    Tensor,
    backward,
    bilinear_upsample_x2,
    broadcast_spatial,
    concat_channels,
    conv2d,
    global_avg_pool,
    max_pool,
    relu,
    slice_channels,
    spatial_softmax,
    tensor_sum,
)


def naive_conv(x, w, b, stride, dilation):
    """Loop oracle: zero outside the image, output size ceil(H / stride)."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    pt = dilation * (kh - 1) // 2
    pl = dilation * (kw - 1) // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u * dilation - pt
                                q = j * stride + v * dilation - pl
                                if 0 <= r < H and 0 <= q < W:
                                    acc += w[o, c, u, v] * x[n, c, r, q]
                    out[n, o, i, j] = acc
    return out


# --- conv2d -------------------------------------------------------------------


def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_dilated_ones_kernel():
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), dilation=2).data[0, 0]
    assert out[0, 0] == 24.0
    img = x[0, 0]
    for i in range(4):
        for j in range(4):
            taps = [img[i + a, j + b] for a in (-2, 0, 2) for b in (-2, 0, 2)
                    if 0 <= i + a < 4 and 0 <= j + b < 4]
            assert out[i, j] == sum(taps)


@pytest.mark.parametrize("stride,dilation,k", [(1, 1, 3), (2, 1, 3), (1, 2, 3), (1, 4, 3), (2, 2, 3), (1, 1, 1)])
def test_conv_matches_loop_oracle(stride, dilation, k):
    rng = np.random.default_rng(stride * 10 + dilation)
    x = rng.normal(size=(2, 2, 7, 6))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, dilation=dilation).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, dilation), atol=1e-12)


def test_conv_receptive_field_dilation_2():
    x = np.zeros((1, 1, 11, 11))
    x[0, 0, 5, 5] = 1.0
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), dilation=2).data[0, 0]
    rows, cols = np.nonzero(out)
    assert rows.max() - rows.min() + 1 == 5
    assert cols.max() - cols.min() + 1 == 5
    assert np.count_nonzero(out) == 9


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError, match="in_channels"):
        conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ShapeError, match="out_channels"):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(5)))


@pytest.mark.parametrize("stride,dilation,k", [(1, 1, 3), (2, 1, 3), (1, 2, 3), (1, 1, 1)])
def test_conv_gradients_finite_difference(stride, dilation, k):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    xt, wt, bt = Tensor(x, True), Tensor(w, True), Tensor(b, True)
    c = rng.normal(size=conv2d(xt, wt, bt, stride, dilation).shape)

    def loss():
        return float(np.sum(c * conv2d(Tensor(x), Tensor(w), Tensor(b), stride, dilation).data))

    backward(tensor_sum(conv2d(xt, wt, bt, stride, dilation) * Tensor(c)))
    for arr, t in ((x, xt), (w, wt), (b, bt)):
        num = numeric_grad(loss, arr)
        for i, g in num.items():
            assert rel_err(t.grad.reshape(-1)[i], g) < 1e-6


# --- pooling --------------------------------------------------------------------


def test_max_pool_single_window():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert max_pool(x).data.tolist() == [[[[4.0]]]]


def test_max_pool_constant():
    out = max_pool(Tensor(np.full((1, 2, 6, 8), 2.5))).data
    assert out.shape == (1, 2, 3, 4)
    assert np.all(out == 2.5)


def test_max_pool_stride_one_ramp_oracle():
    x = np.add.outer(np.arange(5.0), 0.1 * np.arange(5.0))[::-1, :].copy()
    out = max_pool(Tensor(x[None, None]), window=2, stride=1).data[0, 0]
    assert out.shape == (5, 5)
    for i in range(5):
        for j in range(5):
            assert out[i, j] == x[i:i + 2, j:j + 2].max()


def test_max_pool_odd_extent_rounds_up():
    assert max_pool(Tensor(np.zeros((1, 1, 5, 7)))).shape == (1, 1, 3, 4)


def test_max_pool_gradient_goes_to_argmax():
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    t = Tensor(x, True)
    backward(tensor_sum(max_pool(t)))
    assert t.grad.tolist() == [[[[0.0, 1.0], [0.0, 0.0]]]]


def test_max_pool_too_small():
    with pytest.raises(ShapeError):
        max_pool(Tensor(np.zeros((1, 1, 1, 4))))


# --- relu -----------------------------------------------------------------------


def test_relu_values():
    assert relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_dead_region():
    t = Tensor(-np.abs(np.random.default_rng(0).normal(size=(3, 4))) - 0.1, True)
    out = relu(t)
    backward(tensor_sum(out))
    assert np.all(out.data == 0) and np.all(t.grad == 0)


@given(arrays(np.float64, (4, 5), elements=st.floats(-3, 3)))
def test_relu_grad_matches_fd(x):
    t = Tensor(x.copy(), True)
    backward(tensor_sum(relu(t) * relu(t)))
    mask = np.abs(x) >= 1e-4
    expected = 2 * np.maximum(x, 0)
    np.testing.assert_allclose(t.grad[mask], expected[mask], rtol=1e-6, atol=1e-12)
    num = numeric_grad(lambda: float(np.sum(np.maximum(x, 0) ** 2)), x, eps=1e-6)
    for i, g in num.items():
        if mask.reshape(-1)[i]:
            assert rel_err(t.grad.reshape(-1)[i], g, floor=1e-6) < 1e-6


# --- upsampling -----------------------------------------------------------------


def bilinear_oracle(img, out_h, out_w):
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for y in range(out_h):
        for x in range(out_w):
            sy = min(max((y + 0.5) * h / out_h - 0.5, 0), h - 1)
            sx = min(max((x + 0.5) * w / out_w - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[y, x] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_upsample_constant():
    out = bilinear_upsample_x2(Tensor(np.full((1, 1, 3, 5), 3.5))).data
    assert out.shape == (1, 1, 6, 10)
    np.testing.assert_allclose(out, 3.5, rtol=0, atol=1e-15)


def test_upsample_monotone_row():
    row = bilinear_upsample_x2(Tensor(np.array([[[[0.0, 1.0]]]]))).data[0, 0, 0]
    assert row[0] == 0.0 and row[-1] == 1.0
    assert np.all(np.diff(row) >= 0)


def test_upsample_matches_formula():
    img = np.array([[1.0, 4.0], [-2.0, 7.0]])
    out = bilinear_upsample_x2(Tensor(img[None, None])).data[0, 0]
    np.testing.assert_allclose(out, bilinear_oracle(img, 4, 4), atol=1e-14)


def test_upsample_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 3, 4))
    c = rng.normal(size=(1, 2, 6, 8))
    t = Tensor(x, True)
    backward(tensor_sum(bilinear_upsample_x2(t) * Tensor(c)))
    num = numeric_grad(lambda: float(np.sum(c * bilinear_upsample_x2(Tensor(x)).data)), x)
    for i, g in num.items():
        assert rel_err(t.grad.reshape(-1)[i], g) < 1e-6


# --- global pooling and broadcast -----------------------------------------------


def test_global_avg_pool_values():
    assert global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).item() == 2.5
    assert global_avg_pool(Tensor(np.full((1, 1, 3, 3), -1.25))).item() == -1.25


def test_global_avg_pool_loop_oracle():
    x = np.random.default_rng(5).normal(size=(2, 3, 5, 7))
    out = global_avg_pool(Tensor(x)).data
    for b in range(2):
        for c in range(3):
            acc = 0.0
            for i in range(5):
                for j in range(7):
                    acc += x[b, c, i, j]
            assert abs(out[b, c, 0, 0] - acc / 35) < 1e-12


def test_broadcast_spatial_gradient_sums():
    t = Tensor(np.ones((1, 2, 1, 1)), True)
    backward(tensor_sum(broadcast_spatial(t, 3, 4)))
    assert t.grad.tolist() == [[[[12.0]], [[12.0]]]]


# --- concat / slice --------------------------------------------------------------


def test_concat_channel_counts():
    parts = [Tensor(np.zeros((1, c, 2, 2))) for c in (256, 512, 512)]
    assert concat_channels(parts).shape == (1, 1280, 2, 2)


def test_concat_single_identity_and_slice_roundtrip():
    rng = np.random.default_rng(2)
    a, b, c = (rng.normal(size=(1, n, 3, 3)) for n in (2, 3, 4))
    np.testing.assert_array_equal(concat_channels([Tensor(a)]).data, a)
    cat = concat_channels([Tensor(a), Tensor(b), Tensor(c)])
    np.testing.assert_array_equal(slice_channels(cat, 0, 2).data, a)
    np.testing.assert_array_equal(slice_channels(cat, 2, 5).data, b)
    np.testing.assert_array_equal(slice_channels(cat, 5, 9).data, c)


def test_concat_mismatch_names_inputs():
    with pytest.raises(ShapeError, match=r"#1"):
        concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 3, 4)))])


# --- softmax --------------------------------------------------------------------


def test_softmax_known_values():
    raw = np.log(np.array([1.0, 2.0, 3.0, 4.0])).reshape(1, 1, 2, 2)
    out = spatial_softmax(Tensor(raw)).data.reshape(-1)
    np.testing.assert_allclose(out, [0.1, 0.2, 0.3, 0.4], atol=1e-15)


@given(arrays(np.float64, (1, 1, 3, 4), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(raw, shift):
    p = spatial_softmax(Tensor(raw)).data
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(spatial_softmax(Tensor(raw + shift)).data, p, atol=1e-12)


# --- graph and backward ------------------------------------------------------------


def test_sum_gradient_is_ones():
    t = Tensor(np.random.default_rng(0).normal(size=(2, 3)), True)
    backward(tensor_sum(t))
    np.testing.assert_array_equal(t.grad, np.ones((2, 3)))


def test_composite_gradient_finite_difference():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(2, 2, 3, 3))

    def f(xv, wv):
        s = relu(conv2d(xv, wv)).sum()
        return s * s

    xt, wt = Tensor(x, True), Tensor(w, True)
    backward(f(xt, wt))
    loss = lambda: f(Tensor(x), Tensor(w)).item()  # noqa: E731
    for arr, t in ((x, xt), (w, wt)):
        for i, g in numeric_grad(loss, arr, eps=1e-6).items():
            assert rel_err(t.grad.reshape(-1)[i], g) < 1e-4


def test_gradients_accumulate():
    x = np.random.default_rng(1).normal(size=(1, 1, 4, 4))
    t = Tensor(x, True)
    t.zero_grad()
    loss_fn = lambda: tensor_sum(relu(t) * Tensor(x))  # noqa: E731
    backward(loss_fn())
    first = t.grad.copy()
    backward(loss_fn())
    np.testing.assert_array_equal(t.grad, 2 * first)


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        backward(relu(Tensor(np.ones(3), True)))


def test_diamond_graph_visits_once():
    t = Tensor(np.array([2.0]), True)
    a = t * t
    out = tensor_sum(a + a)
    g = Graph.from_output(out)
    assert len(g.nodes) == len({id(n) for n in g.nodes})
    backward(out, g)
    assert t.grad.tolist() == [8.0]


def test_cycle_detected():
    a = Tensor(np.ones(1), True)
    b = a * a
    c = b * b
    # splice c back into b's inputs to form a loop
    b.node = Node(b.node.op, (c,), {}, b.node.backward_fn)
    with pytest.raises(GraphCycleError):
        Graph.from_output(c)


@given(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6))
def test_grad_shape_matches_data(c, h, w):
    x = Tensor(np.random.default_rng(c * h * w).normal(size=(1, c, h, w)), True)
    wt = Tensor(np.ones((2, c, 3, 3)), True)
    backward(tensor_sum(bilinear_upsample_x2(relu(conv2d(x, wt)))))
    assert x.grad.shape == x.shape and wt.grad.shape == wt.shape
    assert np.all(np.isfinite(x.grad))


def test_forward_only_records_nothing():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.node is None and not out.requires_grad
