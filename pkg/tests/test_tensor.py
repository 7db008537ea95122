import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rfnet import tensor as T
from rfnet.tensor import ShapeError, Tensor
from rfnet.tensor.core import make_result
from rfnet.tensor.checkpoint import CheckpointError, dump, load, load_file, save_file
from rfnet.tensor.gradcheck import grad_check
from rfnet.tensor.init import fan_in_uniform, make_rng


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_conv(x, w, b, stride, pad, dil):
    """Direct 7-loop cross-correlation used as an oracle."""
    C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((K, Ho, Wo))
    for k in range(K):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[k]
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[k, c, u, v] * xp[c, i * stride + u * dil, j * stride + v * dil]
                out[k, i, j] = acc
    return out


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_kernel():
    x = t64(np.ones((1, 3, 3)))
    out = T.conv2d(x, t64(np.ones((1, 1, 1, 1))), t64([0.0]))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_average_center():
    x = t64(np.arange(1, 10).reshape(1, 3, 3))
    out = T.conv2d(x, t64(np.full((1, 1, 3, 3), 1 / 9)), padding=1)
    assert out.data[0, 1, 1] == pytest.approx(5.0, abs=1e-12)


def test_conv_dilated_same_size():
    out = T.conv2d(t64(np.ones((1, 8, 8))), t64(np.ones((1, 1, 3, 3))), padding=3, dilation=3)
    assert out.shape == (1, 8, 8)


@pytest.mark.parametrize("dil", [1, 2, 3, 5])
def test_conv_delta_kernel_is_identity(rng, dil):
    x = t64(rng.standard_normal((3, 9, 7)))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = T.conv2d(x, t64(w), padding=dil, dilation=dil)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 2), (1, 5, 5)])
def test_conv_matches_naive(rng, stride, pad, dil):
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad, dilation=dil)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, pad, dil), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(t64(np.ones((2, 4, 4))), t64(np.ones((1, 3, 3, 3))))


def test_conv_output_size_formula():
    assert T.conv_output_size(10, 3, 2, 1, 2) == (10 + 2 - 2 * 2 - 1) // 2 + 1


# -- matmul, softmax, elementwise ------------------------------------------------

def test_matmul_examples():
    a, b = t64([[1, 2], [3, 4]]), t64([[5, 6], [7, 8]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(t64(np.eye(2)), b).data, b.data)
    np.testing.assert_array_equal(T.matmul(t64(np.zeros((3, 2))), b).data, np.zeros((3, 2)))


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(t64([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(t64([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(t64(np.ones((2, 2))), axis=2)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(t64(x), axis=-1).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-6)
    assert np.all(np.isfinite(out))


def test_sigmoid_zero_and_extremes():
    out = T.sigmoid(t64([0.0, 800.0, -800.0])).data
    assert out[0] == 0.5
    assert np.all(np.isfinite(out))


def test_broadcast_mul_channel_scaling(rng):
    f = rng.standard_normal((3, 4, 5))
    s = rng.standard_normal((3, 1, 1))
    out = T.mul(t64(f), t64(s)).data
    np.testing.assert_array_equal(out, f * np.repeat(np.repeat(s, 4, 1), 5, 2))
    np.testing.assert_array_equal(out, T.mul(t64(s), t64(f)).data)


def test_broadcast_rejects_incompatible():
    with pytest.raises(ShapeError):
        T.add(t64(np.ones((3, 4))), t64(np.ones((2, 4))))


def test_concat_shapes():
    parts = [t64(np.ones((1, 4, 5))) for _ in range(3)]
    assert T.concat(parts, axis=0).shape == (3, 4, 5)
    with pytest.raises(ShapeError):
        T.concat([t64(np.ones((1, 4, 5))), t64(np.ones((1, 4, 4)))], axis=0)


# -- pooling ----------------------------------------------------------------------

def test_global_avg_pool():
    np.testing.assert_array_equal(T.global_avg_pool(t64(np.full((3, 2, 2), 7.0))).data, [7, 7, 7])
    np.testing.assert_array_equal(T.global_avg_pool(t64([[[1, 2], [3, 4]]])).data, [2.5])
    np.testing.assert_array_equal(T.global_avg_pool(t64(np.zeros((2, 3, 3)))).data, [0, 0])


def test_channel_pools():
    x = t64(np.array([3.0, 5.0]).reshape(2, 1, 1))
    assert T.channel_avg_pool(x).data.item() == 4.0
    assert T.channel_max_pool(x).data.item() == 5.0
    assert T.channel_max_pool(t64(np.array([-2.0, -7.0]).reshape(2, 1, 1))).data.item() == -2.0
    single = t64(np.arange(6.0).reshape(1, 2, 3))
    np.testing.assert_array_equal(T.channel_avg_pool(single).data, T.channel_max_pool(single).data)


def test_spatial_max_pool(rng):
    x = rng.standard_normal((2, 6, 4))
    out = T.spatial_max_pool(t64(x), 2, 2).data
    np.testing.assert_array_equal(out, x.reshape(2, 3, 2, 2, 2).max(axis=(2, 4)))


def test_upsample_bilinear_constant_and_identity(rng):
    x = rng.standard_normal((2, 4, 4))
    np.testing.assert_allclose(T.upsample_bilinear(t64(x), 4, 4).data, x, atol=1e-14)
    const = T.upsample_bilinear(t64(np.full((1, 3, 3), 2.5)), 12, 12).data
    np.testing.assert_allclose(const, 2.5, atol=1e-14)


# -- autodiff -------------------------------------------------------------------

def test_fan_out_accumulates_exactly():
    x = t64([1.5, -2.0], grad=True)
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_diamond_graph():
    x = t64([3.0], grad=True)
    y = x * x
    z = y * x + y      # x^3 + x^2
    z.sum().backward()
    assert x.grad[0] == pytest.approx(3 * 9 + 2 * 3)


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_sigmoid_derivative_at_zero():
    rep = grad_check(T.sigmoid, [t64([0.0], grad=True)], epsilon=1e-5, tolerance=1e-8)
    x = t64([0.0], grad=True)
    T.sigmoid(x).sum().backward()
    assert x.grad[0] == 0.25
    assert rep.passed


def test_conv_gradient_example(rng):
    x = t64(rng.standard_normal((1, 4, 4)), grad=True)
    w = t64(rng.standard_normal((2, 1, 3, 3)), grad=True)
    rep = grad_check(lambda a, b: T.conv2d(a, b, padding=1), [x, w])
    assert rep.passed, rep.line()


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
    rep = grad_check(bad, [t64([1.0, 2.0, 3.0], grad=True)])
    assert not rep.passed


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


# -- init and checkpoint ----------------------------------------------------------

def test_fan_in_uniform_bounds_and_determinism():
    a = fan_in_uniform(make_rng(5), (8, 4, 3, 3), np.float32)
    b = fan_in_uniform(make_rng(5), (8, 4, 3, 3), np.float32)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.abs(a.data).max() <= math.sqrt(1 / 36)


def test_checkpoint_round_trip_bit_exact(rng, tmp_path):
    arrays = {"a.kernel": rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
              "b": np.array([1.5], dtype=np.float32), "scalar": np.array(3.25, dtype=np.float32)}
    save_file(arrays, tmp_path / "m.rfnt")
    back = load_file(tmp_path / "m.rfnt")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape


def test_checkpoint_layout():
    buf = io.BytesIO()
    dump({"w": np.array([[1.0, 2.0]], dtype=np.float32)}, buf)
    raw = buf.getvalue()
    expected = (b"RFNT" + (1).to_bytes(2, "little") + (1).to_bytes(4, "little")
                + (1).to_bytes(2, "little") + b"w" + bytes([2])
                + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert raw == expected


@pytest.mark.parametrize("blob", [b"", b"XXXX\x01\x00\x00\x00\x00\x00", b"RFNT\x09\x00\x00\x00\x00\x00",
                                  b"RFNT\x01\x00\x01\x00\x00\x00\x01\x00w\x01\x05\x00\x00\x00"])
def test_checkpoint_rejects_bad_files(blob):
    with pytest.raises(CheckpointError):
        load(io.BytesIO(blob))
