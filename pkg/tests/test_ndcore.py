import numpy as np
import pytest

from react_emg.ndcore import (Tensor, concat, conv1d, conv_output_length, counter_rng,
                              cross_entropy, dropout, finite_diff_check,
                              finite_diff_check_params, gelu, layer_norm, no_grad, ops,
                              softmax, stack)
from react_emg.ndcore.random import DropoutContext
from react_emg.ndcore.gradcheck import EPS_LADDER


# ---------------------------------------------------------------- conv


def test_conv_valid_example():
    out = conv1d(np.array([[1.0, 2, 3, 4]]), np.array([[[1.0, 0, -1]]]))
    np.testing.assert_array_equal(out.data, [[-2.0, -2.0]])


@pytest.mark.parametrize("length,k,s,expected", [(11790, 11, 5, 2356), (2356, 5, 2, 1176)])
def test_conv_length_formula(length, k, s, expected):
    assert conv_output_length(length, k, s) == expected
    x = np.zeros((1, 1, length))
    assert conv1d(x, np.zeros((1, 1, k)), stride=s).shape == (1, 1, expected)


def test_conv_channel_mismatch_reports_dims():
    with pytest.raises(ValueError, match="C_in=3"):
        conv1d(np.zeros((2, 10)), np.zeros((4, 3, 3)))


def test_conv_causal_sees_only_past(rng):
    x = rng.normal(size=(2, 3, 20))
    w = rng.normal(size=(4, 3, 5))
    y0 = conv1d(x, w, padding="causal").data
    x2 = x.copy()
    x2[:, :, 12:] += 1.0
    y1 = conv1d(x2, w, padding="causal").data
    np.testing.assert_array_equal(y0[:, :, :12], y1[:, :, :12])
    assert y0.shape == (2, 4, 20)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("stride,padding", [(1, "valid"), (3, "valid"), (2, "causal")])
def test_conv_gradients(seed, stride, padding):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(2, 3, 17)))
    w = Tensor(r.normal(size=(4, 3, 4)))
    b = Tensor(r.normal(size=4))
    target = r.normal(size=conv1d(x, w, stride, padding).shape)

    def loss():
        return ((conv1d(x, w, stride, padding, b) - target) ** 2).mean()

    assert finite_diff_check_params(loss, [x, w, b]) < 1e-4


# ---------------------------------------------------------------- elementwise ops


def test_gelu_zero():
    assert gelu(Tensor(0.0)).item() == 0.0


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor([2.0, 2.0, 2.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_layer_norm_example():
    out = layer_norm(Tensor([2.0, 4.0, 6.0]), eps=0.0).data
    # population std of (2, 4, 6) is sqrt(8/3)
    expected = np.array([-2.0, 0.0, 2.0]) / np.sqrt(8.0 / 3.0)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layer_norm_rejects_empty_axis():
    with pytest.raises(ValueError):
        layer_norm(Tensor(np.zeros((3, 0))))


UNARY = {
    "exp": ops.exp, "tanh": ops.tanh, "sigmoid": ops.sigmoid, "gelu": ops.gelu,
    "sin": ops.sin, "cos": ops.cos, "square": ops.square,
    "softmax": lambda x: ops.softmax(x) * np.arange(1.0, 9.0),
    "log_softmax": lambda x: ops.log_softmax(x) * np.arange(1.0, 9.0),
    "layer_norm": lambda x: ops.layer_norm(x) * np.arange(1.0, 9.0),
    "norm": lambda x: ops.norm(x.reshape(2, 4)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_unary_op_gradients(name, seed):
    x = np.random.default_rng(seed).normal(size=8)
    assert finite_diff_check(lambda t: UNARY[name](t).sum(), x) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_positive_domain_ops(seed):
    x = np.random.default_rng(seed).uniform(0.5, 2.0, size=6)
    for fn in (ops.log, ops.sqrt, ops.abs):
        assert finite_diff_check(lambda t: fn(t).sum(), x) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_linear_matmul_broadcast_gradients(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(2, 3, 5)))
    w = Tensor(r.normal(size=(5, 4)))
    b = Tensor(r.normal(size=4))
    m = Tensor(r.normal(size=(4, 2)))

    def loss():
        y = ops.linear(x, w, b)
        return (ops.matmul(y, m) * y[..., :2]).sum() / (1.0 + (b * b).sum())

    assert finite_diff_check_params(loss, [x, w, b, m]) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_indexing_concat_stack_where_gradients(seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(3, 4)))
    b = Tensor(r.normal(size=(2, 4)))
    cond = r.random((5, 4)) > 0.5

    def loss():
        c = concat([a, b], axis=0)
        s = stack([a[0], b[1], c[4]], axis=1)
        w = ops.where(cond, c, c * 2.0)
        return (s * s).sum() + w[1:4, ::2].sum() + c.transpose(1, 0).reshape(-1)[3]

    assert finite_diff_check_params(loss, [a, b]) < 1e-4


# ---------------------------------------------------------------- autodiff


def test_square_grad():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_abs_loss_matches_finite_differences(rng):
    xs = rng.normal(size=(6, 3))
    y = rng.normal(size=6)
    w0 = rng.normal(size=3)
    err = finite_diff_check(
        lambda w: ops.abs(ops.matmul(Tensor(xs), w.reshape(3, 1)).reshape(6) - y).mean(), w0)
    assert err < 1e-6


def test_shared_input_grads_sum():
    x = Tensor(2.0, requires_grad=True)
    (x * 3.0 + ops.square(x)).backward()
    assert x.grad == 3.0 + 4.0


def test_non_scalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_gradcheck_examples(rng):
    assert finite_diff_check(lambda t: gelu(t).sum(), rng.normal(size=8)) < 1e-4
    assert finite_diff_check(lambda t: (t * t).sum(), np.zeros(1)) < 1e-12
    labels = np.array([0, 3, 1, 2])
    err = finite_diff_check(lambda t: cross_entropy(t.reshape(4, 5), labels),
                            rng.normal(size=20))
    assert err < 1e-4


# ---------------------------------------------------------------- dropout streams


def test_dropout_identity_in_eval():
    x = Tensor(np.ones(10))
    assert dropout(x, 0.5, False) is x


def test_dropout_masks_depend_only_on_key():
    a = counter_rng(0, "layer.a", 7).random(5)
    b = counter_rng(0, "layer.a", 7).random(5)
    c = counter_rng(0, "layer.a", 8).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    ctx = DropoutContext(train=True, seed=0, step=7)
    np.testing.assert_array_equal(ctx.rng("layer.a").random(5), a)


def test_dropout_scales_kept_units():
    x = Tensor(np.ones(1000))
    y = dropout(x, 0.25, True, counter_rng(1, "d", 0)).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}


def test_ladder_estimate_handles_kink_and_tiny_gradient():
    # relu kink 3e-6 from the point: a 1e-5 step straddles it, smaller steps do not
    x = Tensor(np.array([3e-6, 1.0]))
    loss = lambda: (ops.relu(x) * np.array([1.0, 1e-9])).sum()  # noqa: E731
    assert finite_diff_check_params(loss, [x], eps=1e-5) > 0.1
    assert finite_diff_check_params(loss, [x], eps=EPS_LADDER) < 1e-6
