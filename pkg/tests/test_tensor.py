import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bvsviz import tensor as T
from bvsviz.tensor import GradMode, Tensor


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def test_conv_all_ones_sums_to_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel(f64):
    x = np.random.default_rng(0).normal(size=(2, 1, 7, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    out = T.conv2d(Tensor(x), Tensor(k), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("h,w,k,stride,pad", [(5, 5, 3, 1, 0), (6, 7, 3, 2, 1), (8, 8, 1, 2, 0), (4, 9, 2, 3, 2)])
def test_conv_output_shape(h, w, k, stride, pad):
    out = T.conv2d(Tensor(np.zeros((2, 3, h, w))), Tensor(np.zeros((4, 3, k, k))), stride=stride, padding=pad)
    assert out.shape == (2, 4, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 5, 5\).*\(3, 1, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 1, 3, 3))))


def test_conv_kernel_larger_than_input():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_gradients_match_finite_differences(f64):
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    proj = Tensor(rng.normal(size=(1, 3, 3, 3)))
    f = lambda: T.tensor_sum(T.mul(T.conv2d(x, w), proj))
    f().backward()
    for leaf in (x, w):
        num = T.numerical_gradient(lambda: float(f().data), leaf.data, 1e-5)
        assert T.relative_error(leaf.grad, num) < 1e-4


def test_relu_forward():
    np.testing.assert_array_equal(T.relu(Tensor([-2.0, 0.0, 3.0])).data, [0, 0, 3])
    assert not T.relu(Tensor(-np.arange(1, 5.0))).data.any()


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
def test_relu_idempotent(x):
    once = T.relu(Tensor(x, dtype=np.float64)).data
    np.testing.assert_array_equal(T.relu(Tensor(once, dtype=np.float64)).data, once)


@pytest.mark.parametrize("fwd,up,mode,expected", [
    (-2.0, 3.0, GradMode.STANDARD, 0.0),
    (-2.0, 3.0, GradMode.GUIDED, 0.0),
    (2.0, -3.0, GradMode.GUIDED, 0.0),
    (2.0, -3.0, GradMode.STANDARD, -3.0),
    (2.0, 3.0, GradMode.GUIDED, 3.0),
    (2.0, 3.0, GradMode.STANDARD, 3.0),
])
def test_relu_backward_cases(fwd, up, mode, expected):
    assert T.relu_backward(np.array([up]), np.array([fwd]), mode)[0] == expected


def test_relu_backward_shape_mismatch():
    with pytest.raises(ValueError):
        T.relu_backward(np.zeros(3), np.zeros(4), GradMode.STANDARD)


@settings(max_examples=200)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.sampled_from([-1.5, -1e-300, 0.0, 1e-300, 2.0]) | st.floats(-5, 5)),
    arrays(np.float64, n, elements=st.sampled_from([-1.5, -1e-300, 0.0, 1e-300, 2.0]) | st.floats(-5, 5)))))
def test_guided_zero_set(pair):
    fwd, up = pair
    g = T.relu_backward(up, fwd, GradMode.GUIDED)
    keep = (fwd > 0) & (up > 0)
    assert np.all(g[~keep] == 0)
    np.testing.assert_array_equal(g[keep], up[keep])
    assert np.all(g[up >= 0] >= 0)


def test_backward_sum_gives_ones(f64):
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square_gives_x(f64):
    x = Tensor(np.random.default_rng(0).normal(size=(5,)), requires_grad=True)
    ((x ** 2).sum() / 2).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)


def test_backward_twice_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = x.sum()
    loss.backward()
    with pytest.raises(RuntimeError, match="twice"):
        loss.backward()


def test_backward_without_forward_rejected():
    with pytest.raises(RuntimeError, match="no recorded forward"):
        Tensor(1.0, requires_grad=True).backward()


def test_backward_non_scalar_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.mul(x, 2.0).backward()


def test_forward_nan_is_an_error():
    with pytest.raises(FloatingPointError, match="scale"):
        T.mul(Tensor([1.0, np.inf]), 2.0)


def test_nan_gradient_names_op():
    x = Tensor([1.0], requires_grad=True)
    y = T.mul(x, 1e20)
    assert np.isfinite(y.data).all()
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError, match="backward of 'scale'"):
        y.backward(grad=np.array([1e30], dtype=np.float32))


def test_two_layer_net_gradcheck(f64):
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 1, 6, 6)), requires_grad=True)
    w1 = Tensor(rng.normal(size=(3, 1, 3, 3)), requires_grad=True)
    b1 = Tensor(rng.normal(size=(3,)) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(2, 3 * 36)) * 0.1, requires_grad=True)
    proj = Tensor(rng.normal(size=(2, 2)))

    def f():
        h = T.relu(T.conv2d(x, w1, b1, padding=1))
        return T.tensor_sum(T.mul(T.dense(T.flatten(h), w2), proj))

    f().backward()
    for leaf in (x, w1, b1, w2):
        num = T.numerical_gradient(lambda: float(f().data), leaf.data, 1e-5)
        assert T.relative_error(leaf.grad, num) < 1e-4


def test_max_pool_routes_to_first_max():
    x = Tensor(np.array([[[[1.0, 3.0], [3.0, 0.0]]]]), requires_grad=True)
    out = T.max_pool2d(x)
    assert out.data.item() == 3.0
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


class Linear:
    """Single dense layer on the flattened input; no ReLU anywhere."""

    def __init__(self, w):
        self.w = Tensor(w, requires_grad=True)

    def __call__(self, x):
        return T.dense(T.flatten(x), self.w)


class ConvNet:
    def __init__(self, rng, zero_first=False, relu=True):
        self.w1 = Tensor(np.zeros((4, 1, 3, 3)) if zero_first else rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
        self.w2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        self.relu = relu

    def __call__(self, x):
        h = T.conv2d(x, self.w1, padding=1)
        if self.relu:
            h = T.relu(h)
        else:
            h = T.max_pool2d(h)
        return T.dense(T.global_avg_pool(h), self.w2)


def test_guided_gradient_linear_model_is_weight_row(f64):
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 4 * 5))
    g = T.guided_gradient(Linear(w), rng.normal(size=(1, 1, 4, 5)), 1)
    np.testing.assert_allclose(g, w[1].reshape(1, 1, 4, 5), rtol=0, atol=1e-15)


def test_guided_gradient_zero_first_layer():
    rng = np.random.default_rng(3)
    g = T.guided_gradient(ConvNet(rng, zero_first=True), rng.normal(size=(1, 1, 8, 8)), 0)
    assert not g.any()


def test_guided_gradient_deterministic_and_leaves_params():
    rng = np.random.default_rng(4)
    net = ConvNet(rng)
    x = rng.normal(size=(1, 1, 8, 8))
    before = net.w1.data.copy()
    a = T.guided_gradient(net, x, 2)
    b = T.guided_gradient(net, x, 2)
    assert a.tobytes() == b.tobytes()
    assert net.w1.data.tobytes() == before.tobytes()
    assert net.w1.grad is None and net.w2.grad is None


def test_guided_gradient_invalid_class():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError):
        T.guided_gradient(ConvNet(rng), rng.normal(size=(1, 1, 8, 8)), 3)


def test_guided_equals_standard_without_relu():
    rng = np.random.default_rng(6)
    net = ConvNet(rng, relu=False)
    x = rng.normal(size=(2, 1, 8, 8))
    grads = []
    for mode in (GradMode.STANDARD, GradMode.GUIDED):
        inp = Tensor(x, requires_grad=True)
        out = net(inp)
        seed = np.zeros(out.shape, dtype=out.data.dtype)
        seed[:, 1] = 1
        out.backward(mode=mode, inputs=[inp], grad=seed)
        grads.append(inp.grad)
    assert grads[0].tobytes() == grads[1].tobytes()


def test_guided_differs_from_standard_with_relu():
    rng = np.random.default_rng(8)
    net = ConvNet(rng)
    x = rng.normal(size=(1, 1, 8, 8))
    inp = Tensor(x, requires_grad=True)
    out = net(inp)
    seed = np.zeros(out.shape, dtype=out.data.dtype)
    seed[:, 0] = 1
    out.backward(inputs=[inp], grad=seed)
    assert not np.array_equal(inp.grad, T.guided_gradient(net, x, 0))


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(9)
        net = ConvNet(rng)
        x = Tensor(rng.normal(size=(2, 1, 8, 8)), requires_grad=True)
        loss = T.tensor_sum(net(x))
        loss.backward()
        return loss.data.tobytes() + x.grad.tobytes() + net.w1.grad.tobytes()

    assert run() == run()


def test_precision_switch():
    with T.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision("float16")


def test_grad_mode_is_restored_after_backward():
    x = Tensor(np.ones((1, 3)), requires_grad=True)
    T.relu(x).backward(mode=GradMode.GUIDED, grad=np.ones((1, 3), dtype=np.float32))
    assert T._grad_mode() is GradMode.STANDARD


def test_inputs_restricts_accumulation():
    rng = np.random.default_rng(10)
    net = ConvNet(rng)
    x = Tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True)
    net(x).sum().backward(inputs=[x])
    assert x.grad is not None and net.w1.grad is None


@pytest.mark.parametrize("mode_a,mode_b", list(itertools.product(GradMode, GradMode)))
def test_relu_backward_modes_agree_on_positive_upstream(mode_a, mode_b):
    fwd = np.array([-1.0, 0.0, 1.0, 2.0])
    up = np.array([1.0, 2.0, 3.0, 0.5])
    np.testing.assert_array_equal(T.relu_backward(up, fwd, mode_a), T.relu_backward(up, fwd, mode_b))
