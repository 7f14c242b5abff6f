import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import direct_cross_entropy, loop_matmul, naive_conv2d
from rsinet.nn import (
    Adam,
    AdamState,
    ConvLayerParams,
    GraphError,
    MissingGradientError,
    NonFiniteError,
    Tensor,
    activation,
    adam_step,
    backward,
    concat_channels,
    conv2d,
    dense_linear,
    global_avg_pool,
    no_grad,
    softmax,
    softmax_cross_entropy,
    transpose_conv2d,
)
from rsinet.nn import checkpoint, ops
from rsinet.nn.gradcheck import check_gradients


def _conv(w, b=None, **kw):
    return ConvLayerParams(Tensor(w, requires_grad=True),
                           None if b is None else Tensor(b, requires_grad=True), **kw)


# --- conv2d ------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), _conv(np.ones((1, 1, 1, 1)), np.zeros(1)))
    assert np.array_equal(out.data, x)


def test_conv2d_zero_kernel_gives_bias():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    out = conv2d(Tensor(x), _conv(np.zeros((2, 3, 3, 3)), np.array([1.5, -2.0]), padding=1))
    assert np.all(out.data[:, 0] == 1.5) and np.all(out.data[:, 1] == -2.0)


def test_conv2d_dilated_matches_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), _conv(w, b, dilation=2, padding=2))
    assert np.max(np.abs(out.data - naive_conv2d(x, w, b, 1, 2, 2))) <= 1e-12


@pytest.mark.parametrize("stride,pad,dil", [(2, 1, 1), (1, 0, 3), (3, 2, 2), (2, 0, 1)])
def test_conv2d_geometry_matches_naive(stride, pad, dil):
    rng = np.random.default_rng(stride * 10 + pad + dil)
    x = rng.normal(size=(2, 2, 9, 7))
    w = rng.normal(size=(2, 2, 3, 3))
    out = conv2d(Tensor(x), _conv(w, None, stride=stride, padding=pad, dilation=dil))
    assert np.allclose(out.data, naive_conv2d(x, w, None, stride, pad, dil), atol=1e-12)


def test_conv2d_errors():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), _conv(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), _conv(np.ones((1, 1, 3, 3)), dilation=2))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((1, 1, 4, 4))), _conv(np.ones((1, 1, 3, 3)), transposed=True))


# --- transposed conv -----------------------------------------------------------

def test_transpose_conv_identity():
    y = np.random.default_rng(2).normal(size=(1, 1, 4, 5))
    out = transpose_conv2d(Tensor(y), _conv(np.ones((1, 1, 1, 1)), np.zeros(1), transposed=True))
    assert np.array_equal(out.data, y)


def test_transpose_conv_stride2_doubles_extent():
    rng = np.random.default_rng(3)
    layer = ConvLayerParams.create(rng, 4, 3, 3, stride=2, transposed=True)
    assert (layer.padding, layer.output_padding) == (1, 1)
    out = layer(Tensor(rng.normal(size=(1, 4, 5, 7))))
    assert out.shape == (1, 3, 10, 14)


def _adjoint_gap(rng, n, cin, cout, h, w, k, stride, pad, dil):
    wt = rng.normal(size=(cout, cin, k, k))
    fwd = _conv(wt, None, stride=stride, padding=pad, dilation=dil)
    x = rng.normal(size=(n, cin, h, w))
    y_full = conv2d(Tensor(x), fwd)
    ho = h + 2 * pad - dil * (k - 1) - 1
    op = ho % stride
    adj = _conv(wt, None, stride=stride, padding=pad, dilation=dil, transposed=True, output_padding=op)
    y = rng.normal(size=y_full.shape)
    back = transpose_conv2d(Tensor(y), adj)
    assert back.shape == x.shape
    lhs = float(np.sum(y_full.data * y))
    rhs = float(np.sum(x * back.data))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def test_transpose_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(4)
    assert _adjoint_gap(rng, 1, 2, 3, 8, 8, 3, 2, 1, 1) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    stride=st.integers(1, 3),
    dil=st.integers(1, 3),
    k=st.sampled_from([1, 3, 5]),
    pad=st.integers(0, 3),
)
def test_adjoint_identity_property(seed, stride, dil, k, pad):
    rng = np.random.default_rng(seed)
    low = max(1, dil * (k - 1) + 1 - 2 * pad)
    h = int(rng.integers(low, low + 8))
    w = h + stride * int(rng.integers(0, 3))  # same output_padding on both axes
    assert _adjoint_gap(rng, 2, 2, 3, h, w, k, stride, pad, dil) <= 1e-10


# --- activations, linear, concat, pooling ----------------------------------------

def test_activation_values():
    assert activation(Tensor(2.0), "leaky_relu").item() == 2.0
    assert activation(Tensor(-3.0), "leaky_relu", 0.01).item() == pytest.approx(-0.03, abs=1e-15)
    assert activation(Tensor(0.0), "sigmoid").item() == 0.5
    x = Tensor([-1.0, 4.0])
    assert activation(x, "linear") is x
    with pytest.raises(ValueError):
        activation(x, "tanh")


def test_dense_linear_identity_and_bias():
    x = np.random.default_rng(5).normal(size=(3, 4))
    assert np.array_equal(dense_linear(Tensor(x), Tensor(np.eye(4))).data, x)
    out = dense_linear(Tensor(x), Tensor(np.zeros((4, 2))), Tensor([1.0, -1.0]))
    assert np.all(out.data == np.array([1.0, -1.0]))


def test_dense_linear_matches_loop_oracle():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(dense_linear(Tensor(a), Tensor(b)).data - loop_matmul(a, b))) <= 1e-12
    with pytest.raises(ValueError):
        dense_linear(Tensor(a), Tensor(np.ones((3, 2))))


def test_concat_channels():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    assert concat_channels([a]) is a
    b = Tensor(rng.normal(size=(1, 3, 3, 3)))
    out = concat_channels([a, b])
    assert out.shape == (1, 5, 3, 3)
    assert np.array_equal(out.data[:, :2], a.data) and np.array_equal(out.data[:, 2:], b.data)
    with pytest.raises(ValueError):
        concat_channels([a, Tensor(np.ones((1, 1, 4, 3)))])


def test_concat_channels_gradient_splits():
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
    weights = Tensor(rng.normal(size=(1, 5, 3, 3)))
    fn = lambda: ops.sum(ops.mul(concat_channels([a, b]), weights))  # noqa: E731
    assert check_gradients(fn, [a, b]) <= 1e-4


def test_global_avg_pool():
    assert np.all(global_avg_pool(Tensor(np.full((1, 2, 3, 3), 4.2))).data == 4.2)
    assert global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).item() == 2.5
    x = np.random.default_rng(9).normal(size=(2, 3, 5, 4))
    oracle = np.array([[sum(x[n, c].ravel()) / 20 for c in range(3)] for n in range(2)])
    assert np.max(np.abs(global_avg_pool(Tensor(x)).data[:, :, 0, 0] - oracle)) <= 1e-12


# --- cross entropy ---------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((1, 4, 2, 3))), np.zeros((1, 2, 3), dtype=int))
    assert loss.item() == pytest.approx(np.log(4), abs=1e-15)


def test_cross_entropy_saturates():
    logits = np.zeros((1, 3, 2, 2))
    logits[:, 1] = 50.0
    assert softmax_cross_entropy(Tensor(logits), np.ones((1, 2, 2), dtype=int)).item() < 1e-6


def test_cross_entropy_matches_direct_oracle():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(2, 5, 3, 4)) * 3
    labels = rng.integers(0, 5, size=(2, 3, 4))
    labels[0, 0, 0] = 255
    got = softmax_cross_entropy(Tensor(logits), labels, ignore_index=255).item()
    assert abs(got - direct_cross_entropy(logits, labels, 255)) <= 1e-10


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 9), ignore_index=9)


def test_softmax_sums_to_one():
    x = np.random.default_rng(11).normal(size=(2, 6, 4, 4)) * 10
    p = softmax(Tensor(x)).data
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-9


# --- backward --------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(12).normal(size=(2, 3, 4)), requires_grad=True)
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_quadratic():
    data = np.random.default_rng(13).normal(size=(5, 2))
    x = Tensor(data, requires_grad=True)
    backward(ops.mul(ops.sum(ops.mul(x, x)), 0.5))
    assert np.allclose(x.grad, data, rtol=0, atol=1e-15)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(ops.mul(x, 2.0))
    loss = ops.sum(x)
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_nonfinite_values_raise():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ops.mul(Tensor([1e308]), Tensor([1e308]))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.sum(ops.mul(x, x))
    assert not y.requires_grad


def _random_network(rng):
    """Every differentiable operator chained into one scalar."""
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    c1 = ConvLayerParams.create(rng, 2, 3, 3, dilation=2)
    down = ConvLayerParams.create(rng, 6, 4, 3, stride=2)
    up = ConvLayerParams.create(rng, 4, 2, 3, stride=2, transposed=True)
    lin = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    bias = Tensor(rng.normal(size=4), requires_grad=True)
    labels = rng.integers(0, 2, size=(1, 6, 6))
    leaves = [x, c1.weight, c1.bias, down.weight, down.bias, up.weight, up.bias, lin, bias]

    def fn():
        h = ops.leaky_relu(c1(x), 0.1)
        pooled = ops.broadcast_to(global_avg_pool(h), (1, 3, 6, 6))
        cat = concat_channels([h, ops.sigmoid(pooled)])
        logits = up(ops.leaky_relu(down(cat)))
        feat = ops.reshape(global_avg_pool(h), (1, 3))
        dense = dense_linear(feat, lin, bias)
        return ops.add(softmax_cross_entropy(logits, labels), ops.sum(ops.sigmoid(dense)))

    return fn, leaves


@pytest.mark.parametrize("seed", range(3))
def test_composed_network_gradient(seed):
    fn, leaves = _random_network(np.random.default_rng(100 + seed))
    assert check_gradients(fn, leaves) <= 1e-4


def test_forward_backward_bit_identical():
    def run():
        fn, leaves = _random_network(np.random.default_rng(7))
        loss = fn()
        backward(loss)
        return loss.data.tobytes() + b"".join(t.grad.tobytes() for t in leaves)

    assert run() == run()


# --- adam ------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    state = AdamState(lr=1e-3)
    for _ in range(3):
        p.grad = np.zeros(2)
        adam_step({"p": p}, state)
    assert np.array_equal(p.data, [0.3, -1.2])
    assert state.step_count == 3 and p.grad is None


def _hand_unrolled_adam(g, lr, b1, b2, eps, steps):
    m = v = 0.0
    theta = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return theta


def test_adam_single_step_matches_unrolled_recurrence():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8))
    expected = _hand_unrolled_adam(1.0, 1e-3, 0.9, 0.999, 1e-8, 1)
    assert p.data[0] == pytest.approx(expected, abs=1e-18)
    assert p.data[0] == pytest.approx(-9.99999995e-4, rel=1e-8)


def test_adam_multi_step_matches_unrolled_recurrence():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=1e-3)
    for _ in range(5):
        p.grad = np.array([0.7])
        adam_step({"p": p}, state)
    assert p.data[0] == pytest.approx(_hand_unrolled_adam(0.7, 1e-3, 0.9, 0.999, 1e-8, 5), abs=1e-15)


def test_adam_defaults_and_missing_grad():
    assert AdamState().lr == 1e-4
    opt = Adam({"p": Tensor([1.0], requires_grad=True)})
    with pytest.raises(MissingGradientError):
        opt.step()


# --- checkpoint container ------------------------------------------------------------

def test_checkpoint_byte_exact_roundtrip():
    rng = np.random.default_rng(14)
    tensors = {"a.weight": rng.normal(size=(2, 3, 3, 3)), "b": rng.normal(size=4), "s": np.array(3.5)}
    blob = checkpoint.dumps(tensors, {"iteration": 7, "config": {"lr": 1e-4}})
    assert blob[:4] == b"RSIN"
    loaded, meta = checkpoint.loads(blob)
    assert meta["iteration"] == 7
    for k in tensors:
        assert loaded[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()
    assert checkpoint.dumps(loaded, meta) == blob


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.read(io.BytesIO(b"NOPE\x01\x00"))
    blob = checkpoint.dumps({"x": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.loads(blob[:-3])
