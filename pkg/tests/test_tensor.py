import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from circuitscope import tensor as T
from circuitscope.tensor import ShapeMismatchError, Tensor, backward, grad_check
from circuitscope.unet import UNet, UNetConfig, _Context

RNG = np.random.default_rng(1234)


def f64(*shape, scale=1.0):
    return Tensor(RNG.standard_normal(shape) * scale, dtype=np.float64)


# ---------------------------------------------------------------- elementwise


def test_add_values():
    assert T.add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]


def test_mul_by_zero_scalar():
    assert T.mul(Tensor([1, 2]), 0).data.tolist() == [0, 0]


def test_add_gradient_is_ones():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([5.0, 6.0, 7.0])
    backward(T.tsum(T.add(a, b)))
    assert a.grad.tolist() == [1.0, 1.0, 1.0]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as err:
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert err.value.shape_a == (2, 3) and err.value.shape_b == (3, 2)
    assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    X = RNG.standard_normal((2, 5)).astype(np.float32)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)


def test_matmul_small():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_matches_triple_loop():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4, 2))
    want = np.zeros((3, 2))
    for i, j, k in itertools.product(range(3), range(2), range(4)):
        want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeMismatchError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = RNG.standard_normal((1, 1, 5, 5)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_ones_on_ones_counts_neighbours():
    out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    want = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(out, want)


def test_conv_zero_kernel():
    x = RNG.standard_normal((2, 3, 6, 6))
    assert not T.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3)))).data.any()


def test_conv_matches_sliding_window():
    x = RNG.standard_normal((2, 3, 5, 4))
    w = RNG.standard_normal((2, 3, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 2, 5, 4))
    for b, o, i, j in itertools.product(range(2), range(2), range(5), range(4)):
        want[b, o, i, j] = np.sum(xp[b, :, i : i + 3, j : j + 3] * w[o])
    got = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0, 0, 0, 0]])).data, [[0.25] * 4])


def test_softmax_extreme_inputs_stable():
    out = T.softmax_rows(Tensor([[1e4, -1e4]])).data
    assert np.all(np.isfinite(out)) and 0 <= out[0, 1] < out[0, 0] <= 1


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    exps = [mpmath.e ** v for v in (1, 2, 3)]
    want = [float(e / sum(exps)) for e in exps]
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], want, atol=1e-6)


@given(arrays(np.float32, (3, 7), elements=st.floats(-50, 50, width=32)))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_are_distributions(x):
    out = T.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- group norm


def test_group_norm_constant_input_is_zero():
    out = T.group_norm(Tensor(np.full((2, 4, 3, 3), 7.0)), 2).data
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_group_norm_single_group_normalizes_everything():
    x = RNG.standard_normal((2, 4, 3, 3)) * 3 + 1
    out = T.group_norm(Tensor(x, dtype=np.float64), 1).data
    flat = x.reshape(2, -1)
    want = (flat - flat.mean(1, keepdims=True)) / np.sqrt(flat.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out.reshape(2, -1), want, rtol=1e-10)


def test_group_norm_group_stats():
    x = RNG.standard_normal((3, 8, 5, 5)) * 4 - 2
    out = T.group_norm(Tensor(x, dtype=np.float64), 4).data.reshape(3, 4, -1)
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-4)


def test_group_norm_divisibility():
    with pytest.raises(ShapeMismatchError):
        T.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4)


# ---------------------------------------------------------------- backward


def test_sum_gradient():
    x = Tensor(RNG.standard_normal(5), requires_grad=True)
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_square_gradient():
    x = Tensor(RNG.standard_normal(5), requires_grad=True)
    backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)


def test_unused_leaf_gets_zero_grad():
    x = Tensor(RNG.standard_normal(3), requires_grad=True)
    unused = Tensor(RNG.standard_normal(4), requires_grad=True)
    backward(T.tsum(x), inputs=[x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(4))


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeMismatchError):
        backward(T.mul(x, 2.0))


def test_graph_is_topological_and_visits_once():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, x)
    loss = T.tsum(T.add(y, y))
    nodes = T.build_graph(loss)
    assert len({id(n.tensor) for n in nodes}) == len(nodes)
    for n in nodes:
        assert all(i < n.id for i in n.inputs)
    backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad and T.is_grad_enabled()


# ---------------------------------------------------------------- gradient checks

W34 = f64(3, 4)
W_CONV = f64(2, 3, 3, 3, scale=0.5)
TARGET = f64(2, 3, 4, 4)

NONLINEAR = {
    "mul": (lambda x: T.tsum(T.mul(x, x)), (3, 4)),
    "silu": (lambda x: T.tsum(T.mul(T.silu(x), T.silu(x))), (3, 4)),
    "softmax_rows": (lambda x: T.tsum(T.mul(T.softmax_rows(x), W34)), (3, 4)),
    "group_norm": (lambda x: T.tsum(T.mul(T.group_norm(x, 3), TARGET)), (2, 3, 4, 4)),
    "mse": (lambda x: T.mse(x, TARGET), (2, 3, 4, 4)),
    "matmul_quadratic": (lambda x: T.tsum(T.matmul(x, T.transpose(x, (1, 0)))), (3, 4)),
}

LINEAR = {
    "add": lambda x: T.tsum(T.mul(T.add(x, W34), W34)),
    "sub": lambda x: T.tsum(T.mul(T.sub(W34, x), W34)),
    "matmul": lambda x: T.tsum(T.matmul(x, Tensor(W34.data.T.copy(), dtype=np.float64))),
    "reshape": lambda x: T.tsum(T.mul(T.reshape(x, (4, 3)), Tensor(W34.data.reshape(4, 3), dtype=np.float64))),
    "transpose": lambda x: T.tsum(T.mul(T.transpose(x, (1, 0)), Tensor(W34.data.T.copy(), dtype=np.float64))),
    "concat": lambda x: T.tsum(T.mul(T.concat([x, x], axis=0), Tensor(np.concatenate([W34.data] * 2), dtype=np.float64))),
    "mean": lambda x: T.mean(T.mul(x, W34)),
}


@pytest.mark.parametrize("name", sorted(NONLINEAR))
def test_grad_check_nonlinear(name):
    f, shape = NONLINEAR[name]
    assert grad_check(f, RNG.standard_normal(shape)) < 1e-3


@pytest.mark.parametrize("name", sorted(LINEAR))
def test_grad_check_linear(name):
    assert grad_check(LINEAR[name], RNG.standard_normal((3, 4))) < 1e-8


def test_grad_check_conv_input_and_weight():
    x0 = RNG.standard_normal((2, 3, 4, 4))
    assert grad_check(lambda x: T.tsum(T.mul(T.conv2d(x, W_CONV), T.conv2d(x, W_CONV))), x0) < 1e-3
    # linear in the weights
    wx = Tensor(x0, dtype=np.float64)
    proj = f64(2, 2, 4, 4)
    assert grad_check(lambda w: T.tsum(T.mul(T.conv2d(wx, w), proj)), W_CONV.data) < 1e-8


def test_grad_check_pool_and_upsample():
    proj_small = f64(1, 2, 2, 2)
    proj_big = f64(1, 2, 4, 4)
    assert grad_check(lambda x: T.tsum(T.mul(T.avg_pool2x(x), proj_small)), RNG.standard_normal((1, 2, 4, 4))) < 1e-8
    assert grad_check(lambda x: T.tsum(T.mul(T.upsample2x(x), proj_big)), RNG.standard_normal((1, 2, 2, 2))) < 1e-8


def _block_context():
    cfg = UNetConfig(image_size=8, channels=3, base_channels=8, hidden_dim=8, time_embed_dim=8, norm_groups=4, attn_resolution=4)
    model = UNet(cfg, seed=3)
    params = {k: Tensor(v.data.astype(np.float64), dtype=np.float64) for k, v in model.params.items()}
    return _Context(params, cfg, None, None, 0), cfg


def test_grad_check_composed_unet_block():
    """Residual block then attention block then MSE, all parameters from a real U-Net."""
    ctx, cfg = _block_context()
    temb = f64(2, cfg.time_embed_dim)
    target = f64(2, 16, 4, 4)

    def block(x):
        h = ctx.res("encoder_middle.res", x, temb)
        h = ctx.attn("encoder_middle.attn", h)
        return T.mse(h, target)

    x0 = RNG.standard_normal((2, 8, 4, 4))
    assert grad_check(block, x0) < 1e-3


def test_corrupted_gradient_rule_is_caught():
    """Negative control: a silu whose backward rule drops the sigmoid-derivative term."""

    def bad_silu(x: Tensor) -> Tensor:
        s = 1.0 / (1.0 + np.exp(-x.data))
        return Tensor._from_op(x.data * s, (x,), "bad_silu", lambda g: (g * s,))

    f = lambda x: T.tsum(T.mul(bad_silu(x), W34))
    assert grad_check(f, RNG.standard_normal((3, 4))) > 1e-1


@given(arrays(np.float32, (2, 3), elements=st.floats(-10, 10, width=32)))
@settings(max_examples=30, deadline=None)
def test_forward_outputs_finite(x):
    t = Tensor(x)
    for out in (T.silu(t), T.softmax_rows(t), T.group_norm(T.reshape(t, (1, 2, 3, 1)), 2)):
        assert np.all(np.isfinite(out.data))
