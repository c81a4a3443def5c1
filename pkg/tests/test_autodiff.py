"""Every op checked against central differences, plus engine behaviour."""

import numpy as np
import pytest

import timepfn.autodiff as ad
from oracles import central_difference
from timepfn.autodiff import Tensor, no_grad
from timepfn.errors import NotScalarLoss, ShapeMismatch

RNG = np.random.default_rng(20)


def _param(*shape, scale=1.0):
    return Tensor(RNG.standard_normal(shape) * scale, requires_grad=True)


def check(build, params):
    """``build()`` maps params to a tensor; the objective is sum(out * R)."""
    out = build()
    R = np.random.default_rng(0).standard_normal(out.shape)
    for p in params:
        p.grad = None
    loss = ad.sum_(ad.mul(build(), Tensor(R)))
    loss.backward()
    analytic = [p.grad for p in params]

    def f():
        with no_grad():
            return float(np.sum(build().data * R))

    numeric = central_difference(f, [p.data for p in params])
    for a, n in zip(analytic, numeric):
        assert a is not None
        # FD roundoff is ~1e-10 absolute, so tiny entries need an absolute floor
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)


def test_add_sub_mul_div_broadcast():
    a, b = _param(3, 4), _param(4)
    c = Tensor(RNG.uniform(1, 2, (3, 1)), requires_grad=True)
    check(lambda: ad.div(ad.mul(ad.sub(ad.add(a, b), c), b), c), [a, b, c])


def test_operator_overloads():
    a, b = _param(2, 3), _param(3, 2)
    check(lambda: (a * 2.0 - 1.0 + a / 3.0) @ b, [a, b])
    check(lambda: -(1.0 - a) * (2.0 + a), [a])


def test_gelu():
    x = _param(5, 3, scale=2.0)
    check(lambda: ad.gelu(x), [x])


def test_reshape_transpose_swapaxes():
    x = _param(2, 3, 4)
    check(lambda: ad.swapaxes(ad.transpose(ad.reshape(x, (3, 2, 4)), (2, 0, 1)), 0, 2), [x])
    check(lambda: x.reshape(6, 4).transpose(), [x])


def test_getitem_basic_and_fancy():
    x = _param(4, 5)
    check(lambda: x[1:3, ::2], [x])
    idx = np.array([0, 2, 2, 3])
    check(lambda: ad.getitem(x, (idx, slice(None))), [x])


def test_concat_pad_tile():
    a, b = _param(2, 3), _param(2, 2)
    check(lambda: ad.concat([a, b], axis=1), [a, b])
    check(lambda: ad.pad_edge(a, 3, axis=-1), [a])
    c = _param(1, 3, 1)
    check(lambda: ad.tile(c, (2, 1, 4)), [c])
    with pytest.raises(ShapeMismatch):
        ad.tile(b, (2, 3))


def test_reductions():
    x = _param(3, 4, 2)
    check(lambda: ad.sum_(x, axis=1, keepdims=True), [x])
    check(lambda: ad.mean(x, axis=(0, 2)), [x])
    check(lambda: x.mean(), [x])


def test_mse_loss():
    x, y = _param(4, 3), _param(4, 3)
    check(lambda: ad.mse_loss(x, y), [x, y])


def test_matmul_batched_and_linear():
    a, w, bias = _param(2, 3, 4, 5), _param(5, 6), _param(6)
    check(lambda: ad.linear(a, w, bias), [a, w, bias])
    b = _param(2, 3, 5, 2)
    check(lambda: ad.matmul(a, b), [a, b])


def test_conv1d():
    x, w, b = _param(2, 3, 7), _param(4, 3, 3), _param(4)
    check(lambda: ad.conv1d(x, w, b), [x, w, b])
    w4 = _param(2, 3, 4)
    check(lambda: ad.conv1d(x, w4), [x, w4])


def test_conv1d_identity_and_shift():
    x = Tensor(np.arange(5.0).reshape(1, 1, 5))
    ident = ad.conv1d(x, Tensor(np.array([[[0.0, 1.0, 0.0]]]))).data
    shift = ad.conv1d(x, Tensor(np.array([[[1.0, 0.0, 0.0]]]))).data
    np.testing.assert_array_equal(ident, x.data)
    np.testing.assert_array_equal(shift.ravel(), [0, 0, 1, 2, 3])


def test_magnitude_maxpool_values():
    x = Tensor(np.array([[1.0, -3.0, 2.0, 0.5, -0.5]]))
    np.testing.assert_array_equal(ad.magnitude_maxpool1d(x, 3).data, [[-3, -3, -3, 2, 0.5]])
    tie = Tensor(np.array([[-2.0, 2.0, 1.0]]))
    assert ad.magnitude_maxpool1d(tie, 3).data[0, 1] == -2.0  # earliest wins


def test_magnitude_maxpool_gradient():
    # distinct magnitudes keep the selection stable under perturbation
    x = Tensor(RNG.permutation(np.arange(1.0, 25.0)).reshape(2, 12) * RNG.choice([-1, 1], (2, 12)),
               requires_grad=True)
    check(lambda: ad.magnitude_maxpool1d(x, 3), [x])
    check(lambda: ad.magnitude_maxpool1d(x, 2, stride=2), [x])


def test_layer_norm_and_softmax():
    x, g, b = _param(3, 5, 6), _param(6), _param(6)
    check(lambda: ad.layer_norm(x, g, b), [x, g, b])
    check(lambda: ad.layer_norm(x), [x])
    check(lambda: ad.softmax(x, axis=1), [x])
    s = ad.softmax(Tensor(np.array([1000.0, 1000.0]))).data
    np.testing.assert_allclose(s, [0.5, 0.5])


def test_composed_attention_block():
    q, k, v = _param(2, 4, 3), _param(2, 4, 3), _param(2, 4, 3)

    def build():
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) / np.sqrt(3.0)
        return ad.matmul(ad.softmax(scores), v)

    check(build, [q, k, v])


def test_shared_subexpression_accumulates():
    x = _param(3)
    y = x * x + x
    ad.sum_(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_grads_accumulate_across_calls_until_cleared():
    x = _param(2)
    ad.sum_(x * 3.0).backward()
    ad.sum_(x * 3.0).backward()
    np.testing.assert_allclose(x.grad, 6.0)
    x.zero_grad()
    assert x.grad is None


def test_non_scalar_loss_rejected():
    with pytest.raises(NotScalarLoss):
        _param(2, 2).backward()


def test_no_grad_records_nothing():
    x = _param(3)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()
    ad.sum_(x * 2.0).backward()  # recording resumes after the block
    assert x.grad is not None


def test_graph_released_after_backward():
    x = _param(3)
    y = ad.sum_(x * x)
    y.backward()
    assert y._parents == () and y._backward is None


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.add(_param(2, 3), _param(4))
    with pytest.raises(ShapeMismatch):
        ad.reshape(_param(2, 3), (4,))
    with pytest.raises(ShapeMismatch):
        ad.conv1d(_param(1, 2, 5), _param(1, 3, 3))


def test_dropout_is_identity_in_eval_and_scales_in_training():
    x = Tensor(np.ones((100, 100)))
    assert ad.dropout(x, 0.5, None, training=False) is x
    y = ad.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_float32_stays_float32():
    a = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    out = ad.gelu(ad.linear(a, Tensor(np.ones((2, 2), np.float32))))
    assert out.dtype == np.float32
    ad.sum_(out).backward()
    assert a.grad.dtype == np.float32
