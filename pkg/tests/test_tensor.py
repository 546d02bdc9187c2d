import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hvae import tensor as T
from hvae.tensor import ShapeError, Tensor

from conftest import fd_check


def pos(shape):
    return lambda r: r.uniform(0.5, 2.0, shape)


def normal(shape):
    return lambda r: r.standard_normal(shape)


# (name, fn, input makers)
PRIMITIVES = [
    ("add", T.add, [normal((3, 4)), normal((3, 4))]),
    ("add_broadcast", T.add, [normal((2, 3, 4)), normal((3, 1))]),
    ("subtract", T.sub, [normal((3, 4)), normal((4,))]),
    ("multiply", T.mul, [normal((3, 4)), normal((3, 4))]),
    ("divide", T.div, [normal((3, 4)), pos((3, 4))]),
    ("neg", T.neg, [normal((5,))]),
    ("matmul", T.matmul, [normal((3, 4)), normal((4, 2))]),
    ("conv2d", T.conv2d, [normal((2, 3, 5, 4)), normal((2, 3, 3, 3)), normal((2,))]),
    ("conv2d_1x1", T.conv2d, [normal((2, 3, 4, 4)), normal((5, 3, 1, 1))]),
    ("upsample", T.upsample2x, [normal((2, 2, 3, 3))]),
    ("avgpool", T.avgpool2x, [normal((2, 2, 4, 6))]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [normal((2, 1, 3, 3)), normal((2, 2, 3, 3))]),
    ("slice", lambda a: T.slice_channels(a, 1, 3), [normal((2, 4, 2, 2))]),
    ("split", lambda a: T.split_channels(a, [1, 3])[1] * 2.0 + T.split_channels(a, [1, 3])[0],
     [normal((2, 4, 2, 2))]),
    ("exp", T.exp, [normal((3, 3))]),
    ("log", T.log, [pos((3, 3))]),
    ("square", T.square, [normal((3, 3))]),
    ("softplus", T.softplus, [lambda r: 5 * r.standard_normal((4, 4))]),
    ("silu", T.silu, [lambda r: 3 * r.standard_normal((4, 4))]),
    ("sigmoid", T.sigmoid, [lambda r: 3 * r.standard_normal((4, 4))]),
    ("tanh", T.tanh, [normal((4, 4))]),
    ("sum_all", lambda a: T.sum(a), [normal((3, 4))]),
    ("sum_axis", lambda a: T.sum(a, axis=(1, 2)), [normal((2, 3, 4))]),
    ("mean_axis", lambda a: T.mean(a, axis=0, keepdims=True), [normal((3, 4))]),
    ("logsumexp", lambda a: T.logsumexp(a, axis=1), [lambda r: 4 * r.standard_normal((2, 5, 3))]),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [normal((3, 4))]),
    ("bias_channel", T.bias_add, [normal((2, 3, 2, 2)), normal((3,))]),
    ("bias_per_example", T.bias_add, [normal((2, 3, 2, 2)), normal((2, 3))]),
    ("clip", lambda a: T.clip(a, -0.5, 0.7), [lambda r: r.uniform(-2, 2, (30,))]),
    ("where", lambda a, b: T.where(np.arange(6).reshape(2, 3) % 2 == 0, a, b), [normal((2, 3)), normal((2, 3))]),
    ("embedding", lambda t: T.embedding(t, np.array([0, 2, 2, 1])), [normal((3, 4))]),
    ("disc_gauss", lambda m, lv: T.disc_gauss_logprob(np.linspace(-1, 1, 12).reshape(3, 4) * 0 +
                                                      np.round(np.linspace(0, 255, 12)).reshape(3, 4) * 2 / 255 - 1,
                                                      m, lv),
     [lambda r: r.uniform(-1, 1, (3, 4)), lambda r: r.uniform(-4, 0, (3, 4))]),
]


@pytest.mark.parametrize("name,fn,makers", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients_match_central_differences(name, fn, makers):
    r = np.random.default_rng(7)
    inputs = [m(r) for m in makers]
    if name == "clip":  # keep clear of the kinks
        inputs[0] = inputs[0][np.abs(inputs[0] + 0.5) > 1e-3]
        inputs[0] = inputs[0][np.abs(inputs[0] - 0.7) > 1e-3]
    errs = fd_check(fn, inputs, eps=1e-5)
    assert max(errs) < 1e-4, errs


def test_add_example():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_softplus_zero_is_ln2():
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_softplus_large_arguments_stay_finite():
    out = T.softplus(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 800.0


def test_channel_concat_shape():
    a, b = Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 5, 4, 4)))
    assert T.concat([a, b], axis=1).shape == (2, 8, 4, 4)


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Graph() as g:
        T.backward(T.sum(x * x), g)
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_stop_gradient_blocks_one_factor():
    x = Tensor(3.0, requires_grad=True)
    with T.Graph() as g:
        T.backward(T.stop_gradient(x) * x, g)
    assert x.grad == 3.0


def test_stop_gradient_contributes_exactly_zero():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    with T.Graph() as g:
        T.backward(T.sum(T.exp(T.stop_gradient(x))), g)
    assert np.array_equal(x.grad, np.zeros(2))


def test_fan_out_accumulates():
    x = Tensor(2.0, requires_grad=True)
    with T.Graph() as g:
        y = x * 3.0
        T.backward(y + y * y, g)
    # d/dx (3x + 9x^2) = 3 + 18x
    assert x.grad == pytest.approx(39.0)


def test_backward_visits_each_node_once():
    calls = []
    x = Tensor(1.5, requires_grad=True)
    with T.Graph() as g:
        y = T.exp(x)
        z = y * y + y
        for node in g.nodes:
            bw = node.backward
            node.backward = lambda gr, bw=bw, n=node: (calls.append(id(n)), bw(gr))[1]
        T.backward(z, g)
    assert len(calls) == len(set(calls)) == len(g.nodes)
    assert x.grad == pytest.approx(2 * math.exp(3.0) + math.exp(1.5))


def test_random_three_layer_network_matches_finite_differences():
    r = np.random.default_rng(3)
    x = r.standard_normal((5, 4))
    ws = [r.standard_normal((4, 6)) * 0.5, r.standard_normal((6, 6)) * 0.5, r.standard_normal((6, 2)) * 0.5]

    def net(w1, w2, w3):
        h = T.silu(T.matmul(Tensor(x), w1))
        h = T.tanh(T.matmul(h, w2))
        return T.softplus(T.matmul(h, w3))

    assert max(fd_check(net, ws)) < 1e-4


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Graph() as g:
        with pytest.raises(ShapeError, match="scalar"):
            T.backward(x * 2.0, g)


def test_backward_without_graph_rejected():
    with pytest.raises(RuntimeError):
        T.backward(Tensor(1.0))


def test_shape_mismatch_names_kind_and_shapes():
    with pytest.raises(ShapeError) as exc:
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    msg = str(exc.value)
    assert "add" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="conv"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_forward_op_dispatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert np.array_equal(T.forward_op("multiply", a, b).data, [3.0, 10.0])
    with pytest.raises(ValueError, match="unknown op"):
        T.forward_op("fft", a)


def test_no_recording_outside_graph():
    x = Tensor(1.0, requires_grad=True)
    y = x * 2.0
    assert y.is_leaf and not y.requires_grad


def test_check_finite_flag():
    T.set_check_finite(True)
    try:
        with pytest.raises(T.NonFiniteError):
            T.log(Tensor([-1.0]))
    finally:
        T.set_check_finite(False)


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(11)
        x = Tensor(r.standard_normal((2, 3, 4, 4)))
        w = Tensor(r.standard_normal((3, 3, 3, 3)), requires_grad=True)
        with T.Graph() as g:
            loss = T.sum(T.square(T.silu(T.conv2d(x, w))))
            T.backward(loss, g)
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(x0, a, b):
    def grad_of(fn):
        x = Tensor(x0.copy(), requires_grad=True)
        with T.Graph() as g:
            T.backward(fn(x), g)
        return x.grad

    f = lambda x: T.sum(T.tanh(x) * x)  # noqa: E731
    h = lambda x: T.sum(T.softplus(x))  # noqa: E731
    combined = grad_of(lambda x: f(x) * a + h(x) * b)
    assert np.allclose(combined, a * grad_of(f) + b * grad_of(h), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 4), elements=finite))
def test_upsample_then_pool_is_identity(x):
    assert np.allclose(T.avgpool2x(T.upsample2x(Tensor(x))).data, x)
