import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oddkit import autodiff as ad
from oddkit.errors import NumericDomainError, ShapeError, ValidationError

from gradcheck import check_gradients

TOL = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


def projected(op, out_shape, seed=99):
    """Scalar loss ``sum(op(...) * R)`` for a fixed random R."""
    r = rng(seed).standard_normal(out_shape)
    return lambda ts: ad.tsum(op(*ts) * r)


def naive_conv(x, k, stride):
    b, h, w, cin = x.shape
    kk, _, _, cout = k.shape
    oh, pt, _ = ad.same_padding(h, kk, stride)
    ow, pl, _ = ad.same_padding(w, kk, stride)
    out = np.zeros((b, oh, ow, cout))
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                for di in range(kk):
                    for dj in range(kk):
                        y, xx = i * stride - pt + di, j * stride - pl + dj
                        if 0 <= y < h and 0 <= xx < w:
                            out[n, i, j] += x[n, y, xx] @ k[di, dj]
    return out


# ---------------------------------------------------------------- dense

def test_dense_identity_weight():
    x = rng().standard_normal((3, 4))
    out = ad.dense(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(out.data, x)


def test_dense_hand_arithmetic():
    out = ad.dense(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([0.5]))
    np.testing.assert_array_equal(out.data, [[3.5]])


def test_dense_matches_triple_loop():
    g = rng(1)
    x, w, b = g.standard_normal((3, 4)), g.standard_normal((4, 5)), g.standard_normal(5)
    expected = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            expected[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(4))
    np.testing.assert_allclose(ad.dense(x, w, b).data, expected, rtol=1e-12)


def test_dense_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.dense(np.zeros((2, 3)), np.zeros((4, 5)))


def test_dense_gradients():
    g = rng(2)
    arrays = [g.standard_normal((3, 4)), g.standard_normal((4, 2)), g.standard_normal(2)]
    assert check_gradients(projected(ad.dense, (3, 2)), arrays) < TOL


# ---------------------------------------------------------------- convolution

def test_conv_unit_kernel_is_identity():
    x = rng().standard_normal((2, 5, 5, 1))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), 1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("size,k,stride", [(32, 3, 2), (32, 1, 2), (16, 4, 2), (7, 3, 2), (5, 3, 1)])
def test_conv_output_size_is_ceil(size, k, stride):
    out = ad.conv2d(np.zeros((1, size, size, 2)), np.zeros((k, k, 2, 3)), stride)
    assert out.shape == (1, -(-size // stride), -(-size // stride), 3)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_sliding_window_oracle(stride):
    g = rng(3)
    x, k = g.standard_normal((2, 5, 5, 2)), g.standard_normal((3, 3, 2, 3))
    np.testing.assert_allclose(ad.conv2d(x, k, stride).data, naive_conv(x, k, stride), rtol=1e-10, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), 1)


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (4, 2), (1, 2)])
def test_conv_gradients(k, stride):
    g = rng(4)
    x, kern = g.standard_normal((2, 6, 6, 2)), g.standard_normal((k, k, 2, 3))
    out = -(-6 // stride)
    assert check_gradients(projected(lambda a, b: ad.conv2d(a, b, stride), (2, out, out, 3)), [x, kern]) < TOL


@pytest.mark.parametrize("size,stride", [(16, 2), (4, 2), (5, 1)])
def test_deconv_output_size(size, stride):
    out = ad.deconv2d(np.zeros((1, size, size, 2)), np.zeros((3, 3, 4, 2)), stride)
    assert out.shape == (1, size * stride, size * stride, 4)


def test_deconv_unit_kernel_is_identity():
    x = rng().standard_normal((2, 4, 4, 1))
    np.testing.assert_array_equal(ad.deconv2d(x, np.ones((1, 1, 1, 1)), 1).data, x)


@pytest.mark.parametrize("k,stride,size", [(3, 2, 4), (4, 2, 3), (1, 2, 5), (3, 1, 5), (3, 2, 5)])
def test_deconv_is_adjoint_of_conv(k, stride, size):
    g = rng(5)
    kern = g.standard_normal((k, k, 2, 3))
    x = g.standard_normal((2, size * stride, size * stride, 2))
    y = g.standard_normal((2, size, size, 3))
    lhs = np.sum(ad.conv2d(x, kern, stride).data * y)
    rhs = np.sum(x * ad.deconv2d(y, kern, stride).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("k,stride", [(3, 2), (4, 2), (1, 2), (3, 1)])
def test_deconv_gradients(k, stride):
    g = rng(6)
    x, kern = g.standard_normal((2, 3, 3, 3)), g.standard_normal((k, k, 2, 3))
    out = 3 * stride
    assert check_gradients(projected(lambda a, b: ad.deconv2d(a, b, stride), (2, out, out, 2)), [x, kern]) < TOL


# ---------------------------------------------------------------- activations and normalization

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    assert ad.sigmoid(np.array(0.0)).item() == 0.5


def test_elementwise_gradients():
    g = rng(7)
    x = g.standard_normal((3, 4))
    x[np.abs(x) < 0.05] = 0.3  # keep away from the relu/abs kinks
    for op in (ad.relu, ad.sigmoid, ad.exp, ad.square, ad.absolute):
        assert check_gradients(projected(op, (3, 4)), [x]) < TOL, op.__name__
    pos = np.abs(x) + 0.5
    for op in (ad.log, ad.sqrt, lambda t: ad.power(t, 1.5)):
        assert check_gradients(projected(op, (3, 4)), [pos]) < TOL


def test_arithmetic_broadcast_gradients():
    g = rng(8)
    a, b = g.standard_normal((3, 4)), g.standard_normal((1, 4))
    c = np.abs(g.standard_normal(4)) + 0.5
    loss = projected(lambda x, y, z: (x + y) * x / z - y, (3, 4))
    assert check_gradients(loss, [a, b, c]) < TOL
    assert check_gradients(lambda ts: ad.mean(ad.tsum(ts[0], axis=1) ** 2), [a]) < TOL


def test_batch_norm_standardized_batch_is_fixed_point():
    x = rng(9).standard_normal((16, 3))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    out = ad.batch_norm(x, np.ones(3), np.zeros(3), ad.RunningStats(3), training=True)
    assert np.max(np.abs(out.data - x)) < 1e-6


def test_batch_norm_rejects_single_sample_batch():
    with pytest.raises(ValidationError):
        ad.batch_norm(np.zeros((1, 2, 2, 3)), np.ones(3), np.zeros(3), ad.RunningStats(3), training=True)


def test_batch_norm_running_moments_momentum():
    stats = ad.RunningStats(2, momentum=0.99)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    ad.batch_norm(x, np.ones(2), np.zeros(2), stats, training=True)
    np.testing.assert_allclose(stats.mean, 0.01 * np.array([2.0, 4.0]))
    np.testing.assert_allclose(stats.var, 0.99 + 0.01 * np.array([1.0, 4.0]))


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    g = rng(10)
    x = g.standard_normal((3, 2, 2, 3))
    gamma, beta = g.standard_normal(3), g.standard_normal(3)
    stats = ad.RunningStats(3)
    stats.mean, stats.var = g.standard_normal(3), np.abs(g.standard_normal(3)) + 0.5
    frozen = (stats.mean.copy(), stats.var.copy())

    def loss(ts):
        s = ad.RunningStats(3)
        s.mean, s.var = frozen[0].copy(), frozen[1].copy()
        return ad.tsum(ad.batch_norm(ts[0], ts[1], ts[2], s, training) * np.arange(36.0).reshape(3, 2, 2, 3))

    assert check_gradients(loss, [x, gamma, beta]) < TOL


# ---------------------------------------------------------------- softmax, cosine similarity, entropy

def test_softmax_equal_entries_uniform():
    np.testing.assert_allclose(ad.softmax(np.full(5, 3.0)).data, np.full(5, 0.2))


def test_softmax_stability():
    out = ad.softmax(np.array([1000.0, 1000.1, 999.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out.sum() - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_simplex(values):
    out = ad.softmax(np.array(values)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) < 1e-9


def test_cosine_sim_extremes():
    v = np.array([1.0, -2.0, 3.0])
    assert ad.cosine_sim(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert ad.cosine_sim(v, -v).item() == pytest.approx(-1.0, abs=1e-15)


def test_cosine_sim_zero_vector():
    with pytest.raises(NumericDomainError):
        ad.cosine_sim(np.zeros(3), np.ones(3))


def test_softmax_normalize_entropy_gradients():
    g = rng(11)
    x = g.standard_normal((3, 5))
    assert check_gradients(projected(ad.softmax, (3, 5)), [x]) < TOL
    assert check_gradients(projected(ad.l2_normalize, (3, 5)), [x]) < TOL
    a, b = g.standard_normal(4), g.standard_normal(4)
    assert check_gradients(lambda ts: ad.cosine_sim(ts[0], ts[1]), [a, b]) < TOL
    p = np.abs(g.standard_normal((3, 5))) + 0.05
    assert check_gradients(lambda ts: ad.tsum(ad.entropy(ts[0])), [p]) < TOL


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    w = ad.Tensor(rng().standard_normal((3, 2)), requires_grad=True)
    grads = ad.backward(ad.tsum(w), {"w": w})
    np.testing.assert_array_equal(grads["w"], np.ones((3, 2)))


def test_backward_reconstruction_loss_matches_finite_differences():
    g = rng(12)
    x, w, b = g.standard_normal((4, 3)), g.standard_normal((3, 3)), g.standard_normal(3)
    loss = lambda ts: ad.tsum(ad.square(ts[0] - ad.dense(ts[0], ts[1], ts[2])))  # noqa: E731
    assert check_gradients(loss, [x, w, b]) < TOL


def test_unused_parameter_gets_zero_gradient():
    w = ad.Tensor(np.ones(3), requires_grad=True)
    unused = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    grads = ad.backward(ad.tsum(w * 2.0), {"w": w, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    w = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError):
        ad.backward(w * 2.0)


def test_shared_subexpression_accumulates():
    w = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = w * w
    grads = ad.backward(ad.tsum(y + y), {"w": w})
    np.testing.assert_allclose(grads["w"], [8.0])


def test_no_grad_records_nothing():
    w = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_float32_stays_float32():
    w = ad.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ad.sigmoid(w * 0.5 + 1.0) - 2.0
    assert y.dtype == np.float32


# ---------------------------------------------------------------- checkpoint files

def test_checkpoint_round_trip_is_bit_exact():
    g = rng(13)
    tensors = {"encoder.conv1.weight": g.standard_normal((3, 3, 3, 16)).astype(np.float32),
               "encoder.conv1.bias": np.zeros(16, np.float32),
               "memory.M": g.standard_normal((500, 64)).astype(np.float32),
               "scalar": np.array(1.5, np.float32)}
    buf = io.BytesIO()
    ad.write_tensors(buf, tensors)
    buf.seek(0)
    back = ad.read_tensors(buf)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_header_layout():
    buf = io.BytesIO()
    ad.write_tensors(buf, {"ab": np.array([1.0, 2.0], np.float32)})
    raw = buf.getvalue()
    assert raw[:4] == ad.CHECKPOINT_MAGIC
    assert raw[4:12] == np.array([1, 1], "<u4").tobytes()
    assert raw[12:16] == np.array([2], "<u4").tobytes() and raw[16:18] == b"ab"
    assert raw[18:26] == np.array([1, 2], "<u4").tobytes()
    assert raw[26:] == np.array([1.0, 2.0], "<f4").tobytes()
