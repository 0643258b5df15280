import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

import rim.autodiff as ad

from conftest import check_grads

TOL = 1e-4  # smooth ops


def naive_conv(x, w, b=None, stride=1, dilation=1):
    """Loop implementation of zero-padded 'same' convolution (cross-correlation)."""
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    k_eff = dilation * (k - 1) + 1

    def pads(n):
        out = math.ceil(n / stride)
        total = max((out - 1) * stride + k_eff - n, 0)
        return out, total // 2, total - total // 2

    ho, top, bottom = pads(h)
    wo, left, right = pads(wd)
    xp = np.zeros((bsz, c, h + top + bottom, wd + left + right))
    xp[:, :, top:top + h, left:left + wd] = x
    out = np.zeros((bsz, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k_eff:dilation, j * stride:j * stride + k_eff:dilation]
            out[:, :, i, j] = np.einsum("bcyx,ocyx->bo", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def dense_matrix(fn, in_shape):
    """Matrix of a linear map on flattened arrays, column by column."""
    n = int(np.prod(in_shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1
        cols.append(np.asarray(fn(e.reshape(in_shape))).ravel())
    return np.stack(cols, axis=1)


def t64(rng, *shape, grad=True, low=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, 1, shape)
    return ad.Tensor(data, requires_grad=grad)


def weighted_sum(y, seed=7):
    """Scalar sum(c * y) with fixed random c, so every output element matters."""
    c = np.random.default_rng(seed).standard_normal(y.shape)
    return ad.sum(ad.mul(y, ad.Tensor(c)))


# ---------------------------------------------------------------------------
# forward values against independent oracles

@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (3, 1), (1, 2), (1, 4), (2, 2)])
@pytest.mark.parametrize("hw", [(5, 5), (6, 7), (8, 8)])
def test_conv2d_matches_loop_oracle(f64, rng, stride, dilation, hw):
    x = rng.standard_normal((2, 3, *hw))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride, dilation=dilation)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, dilation), rtol=1e-12, atol=1e-12)
    assert out.shape[2:] == (ad.conv_output_size(hw[0], stride), ad.conv_output_size(hw[1], stride))


def test_conv2d_stride1_matches_scipy(f64, rng):
    x = rng.standard_normal((1, 2, 7, 9))
    w = rng.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w)).data
    for o in range(3):
        ref = sum(ndimage.correlate(x[0, c], w[o, c], mode="constant") for c in range(2))
        np.testing.assert_allclose(out[0, o], ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,dilation,size", [(1, 1, (5, 5)), (2, 1, (6, 6)), (2, 1, (7, 5)), (1, 4, (9, 9)),
                                                  (3, 1, (8, 7))])
def test_conv2d_transpose_is_exact_adjoint(f64, rng, stride, dilation, size):
    w = rng.standard_normal((3, 2, 3, 3))
    mat = dense_matrix(lambda v: naive_conv(v, w, stride=stride, dilation=dilation), (1, 2, *size))
    ho, wo = (ad.conv_output_size(s, stride) for s in size)
    y = rng.standard_normal((1, 3, ho, wo))
    out = ad.conv2d_transpose(ad.Tensor(y), ad.Tensor(w), stride=stride, output_size=size, dilation=dilation)
    np.testing.assert_allclose(out.data.ravel(), mat.T @ y.ravel(), rtol=1e-12, atol=1e-12)


def test_conv2d_transpose_rejects_inconsistent_size(f64, rng):
    y = ad.Tensor(rng.standard_normal((1, 2, 4, 4)))
    w = ad.Tensor(rng.standard_normal((2, 3, 3, 3)))
    with pytest.raises(ValueError):
        ad.conv2d_transpose(y, w, stride=2, output_size=(10, 10))
    assert ad.conv2d_transpose(y, w, stride=2).shape == (1, 3, 8, 8)
    assert ad.conv2d_transpose(y, w, stride=2, output_size=(7, 7)).shape == (1, 3, 7, 7)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(3, 9), w=st.integers(3, 9), cin=st.integers(1, 4), cout=st.integers(1, 9),
    stride=st.integers(1, 3), dilation=st.integers(1, 3), seed=st.integers(0, 2 ** 16),
)
def test_property_conv_adjoint_identity(h, w, cin, cout, stride, dilation, seed):
    r = np.random.default_rng(seed)
    with ad.precision("float64"):
        x = r.standard_normal((2, cin, h, w))
        k = r.standard_normal((cout, cin, 3, 3))
        y_shape = (2, cout, ad.conv_output_size(h, stride), ad.conv_output_size(w, stride))
        y = r.standard_normal(y_shape)
        ax = ad.conv2d(ad.Tensor(x), ad.Tensor(k), stride=stride, dilation=dilation).data
        aty = ad.conv2d_transpose(ad.Tensor(y), ad.Tensor(k), stride=stride, output_size=(h, w),
                                  dilation=dilation).data
    lhs, rhs = np.vdot(ax, y), np.vdot(x, aty)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=20, deadline=None)
@given(f=st.integers(1, 5), cin=st.integers(1, 4), hw=st.integers(2, 6), dilation=st.integers(1, 2),
       seed=st.integers(0, 2 ** 16))
def test_property_fused_gru_matches_reference(f, cin, hw, dilation, seed):
    r = np.random.default_rng(seed)
    with ad.precision("float64"):
        feats = ad.Tensor(r.standard_normal((2, cin, hw, hw)))
        state = ad.Tensor(r.standard_normal((2, f, hw, hw)))
        params = {
            "w_x": ad.Tensor(r.standard_normal((3 * f, cin, 3, 3)) * 0.3),
            "b": ad.Tensor(r.standard_normal(3 * f)),
            "w_h": ad.Tensor(r.standard_normal((2 * f, f, 3, 3)) * 0.3),
            "w_hn": ad.Tensor(r.standard_normal((f, f, 3, 3)) * 0.3),
        }
        fused = ad.gru_step(feats, state, params, dilation).data
        ref = ad.gru_step_reference(feats, state, params, dilation).data
    np.testing.assert_allclose(fused, ref, rtol=1e-12, atol=1e-12)


def test_elementwise_values(f64):
    v = np.array([-30.0, -1.0, 0.0, 0.5, 40.0])
    x = ad.Tensor(v)
    np.testing.assert_allclose(ad.sigmoid(x).data, 1 / (1 + np.exp(-v)))
    np.testing.assert_allclose(ad.softplus(x).data, np.log1p(np.exp(v)))
    np.testing.assert_allclose(ad.tanh(x).data, np.tanh(v))
    np.testing.assert_array_equal(ad.relu(x).data, np.maximum(v, 0))
    assert ad.elementwise("logistic-sigmoid", x).data[2] == 0.5
    with pytest.raises(ValueError):
        ad.elementwise("cosh", x)


# ---------------------------------------------------------------------------
# gradients against central finite differences

UNARY = ["tanh", "sigmoid", "softplus", "relu", "neg"]


@pytest.mark.parametrize("name", UNARY)
def test_grad_unary(f64, rng, name):
    data = rng.standard_normal((2, 3, 4))
    if name == "relu":
        data = np.where(np.abs(data) < 0.05, 0.3, data)  # stay clear of the kink
    x = ad.Tensor(data, requires_grad=True)
    fn = getattr(ad, name)
    assert check_grads(lambda: weighted_sum(fn(x)), [x]) < TOL


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_grad_binary(f64, rng, name):
    a, b = t64(rng, 2, 5), t64(rng, 2, 5)
    fn = getattr(ad, name)
    assert check_grads(lambda: weighted_sum(fn(a, b)), [a, b]) < TOL


def test_grad_scalar_ops(f64, rng):
    x = t64(rng, 3, 4)
    s = ad.Tensor(np.array(0.7), requires_grad=True)
    assert check_grads(lambda: weighted_sum(ad.scale(x, s)), [x, s]) < TOL
    assert check_grads(lambda: weighted_sum(ad.scale(ad.add_scalar(x, 2.0), -1.5)), [x]) < TOL
    assert check_grads(lambda: weighted_sum(x * 3.0 - 1.0 + x), [x]) < TOL


def test_grad_structural(f64, rng):
    a, b = t64(rng, 2, 2, 3, 3), t64(rng, 2, 3, 3, 3)
    assert check_grads(lambda: weighted_sum(ad.concat([a, b])), [a, b]) < TOL
    assert check_grads(lambda: weighted_sum(ad.channel_slice(b, 1, 3)), [b]) < TOL
    s = ad.Tensor(rng.uniform(0.5, 2, 2), requires_grad=True)
    assert check_grads(lambda: weighted_sum(ad.batch_scale(a, s)), [a, s]) < TOL


def test_grad_reductions(f64, rng):
    x, y = t64(rng, 2, 3, 4), t64(rng, 2, 3, 4)
    assert check_grads(lambda: ad.sum(ad.tanh(x)), [x]) < TOL
    assert check_grads(lambda: ad.mean(ad.tanh(x)), [x]) < TOL
    assert check_grads(lambda: ad.mse(x, y), [x, y]) < TOL


def test_grad_linear_map(f64, rng):
    m = rng.standard_normal((5, 6))
    x = t64(rng, 2, 6)
    out = lambda: weighted_sum(ad.linear_map(x, lambda v: v @ m.T, lambda g: g @ m))  # noqa: E731
    assert check_grads(out, [x]) < TOL


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (1, 4), (3, 1)])
def test_grad_conv2d(f64, rng, stride, dilation):
    x, w, b = t64(rng, 2, 3, 6, 5), t64(rng, 4, 3, 3, 3), t64(rng, 4)
    loss = lambda: weighted_sum(ad.conv2d(x, w, b, stride, dilation))  # noqa: E731
    assert check_grads(loss, [x, w, b]) < TOL


def test_grad_conv2d_wide_output_path(f64, rng):
    # more than 4x as many outputs as inputs exercises the col2im input gradient
    x, w = t64(rng, 1, 1, 5, 5), t64(rng, 6, 1, 3, 3)
    assert check_grads(lambda: weighted_sum(ad.conv2d(x, w)), [x, w]) < TOL


@pytest.mark.parametrize("stride,size", [(1, (5, 5)), (2, (6, 6)), (2, (7, 5))])
def test_grad_conv2d_transpose(f64, rng, stride, size):
    ho, wo = (ad.conv_output_size(s, stride) for s in size)
    x, w, b = t64(rng, 2, 3, ho, wo), t64(rng, 3, 2, 3, 3), t64(rng, 2)
    loss = lambda: weighted_sum(ad.conv2d_transpose(x, w, b, stride, size))  # noqa: E731
    assert check_grads(loss, [x, w, b]) < TOL


@pytest.mark.parametrize("dilation", [1, 2])
def test_grad_gru_step(f64, rng, dilation):
    f, cin = 3, 2
    feats, state = t64(rng, 2, cin, 4, 4), t64(rng, 2, f, 4, 4)
    params = {"w_x": t64(rng, 3 * f, cin, 3, 3), "b": t64(rng, 3 * f),
              "w_h": t64(rng, 2 * f, f, 3, 3), "w_hn": t64(rng, f, f, 3, 3)}
    tensors = [feats, state, *params.values()]
    assert check_grads(lambda: weighted_sum(ad.gru_step(feats, state, params, dilation)), tensors) < TOL
    assert check_grads(lambda: weighted_sum(ad.gru_step_reference(feats, state, params, dilation)),
                       tensors) < TOL


# ---------------------------------------------------------------------------
# graph semantics

def test_backward_accumulates_shared_inputs(f64):
    x = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with ad.new_graph() as g:
        grads = ad.backward(ad.sum(ad.mul(x, x)), g)
    np.testing.assert_allclose(grads[x], 2 * x.data)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_consumes_graph_and_validates_loss(f64, rng):
    x = t64(rng, 3)
    with ad.new_graph() as g:
        y = ad.tanh(x)
        assert len(g.nodes) == 1
        with pytest.raises(ValueError):
            ad.backward(y, g)
        ad.backward(ad.sum(y), g)
        assert g.nodes == []
    with pytest.raises(RuntimeError):
        ad.backward(ad.sum(ad.Tensor(np.ones(3))))


def test_no_grad_records_nothing(f64, rng):
    x = t64(rng, 3)
    with ad.new_graph() as g, ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad and g.nodes == []
    assert ad.grad_enabled()


def test_non_finite_values_are_rejected(f64):
    x = ad.Tensor(np.array([1e308]), requires_grad=True)
    with ad.new_graph(), np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        ad.scale(x, 10.0)


def test_precision_context_restores(rng):
    assert ad.get_dtype() == np.float32
    with ad.precision("float64"):
        assert ad.Tensor([1.0]).dtype == np.float64
    assert ad.Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        ad.set_precision("float16")


def test_shape_errors():
    with pytest.raises(ValueError):
        ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        ad.conv2d(ad.Tensor(np.ones((1, 2, 4, 4))), ad.Tensor(np.ones((3, 1, 3, 3))))
    with pytest.raises(ValueError):
        ad.channel_slice(ad.Tensor(np.ones((1, 2, 4, 4))), 1, 5)
