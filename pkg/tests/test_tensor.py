import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowood import tensor as T
from flowood.tensor import ShapeError, Tensor, no_grad
from oracles import numerical_grad, rel_err


def grad_check(fn, *arrays_in, tol=1e-4):
    """Compare autodiff of sum(fn(*inputs) * w) against central differences for each input."""
    rng = np.random.default_rng(123)
    ts = [Tensor(a, requires_grad=True) for a in arrays_in]
    out = fn(*ts)
    w = rng.uniform(0.5, 1.5, out.shape)
    (out * w).sum().backward()
    for k, a in enumerate(arrays_in):
        def f(v, k=k):
            args = [Tensor(x) for x in arrays_in]
            args[k] = Tensor(v)
            return float(np.sum(fn(*args).data * w))
        assert rel_err(ts[k].grad, numerical_grad(f, a)) < tol, f"input {k}"


def rand(shape, lo=-2.0, hi=2.0, seed=0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


# -- examples -------------------------------------------------------------------------------


def test_add_example():
    assert np.array_equal(T.elementwise_binary([1, 2], [3, 4], "add").data, [4, 6])


def test_scalar_broadcast_mul():
    out = T.elementwise_binary([2], [[1, 2], [3, 4]], "mul")
    assert np.array_equal(out.data, [[2, 4], [6, 8]])


def test_div_by_zero_is_ieee():
    with np.errstate(all="raise"):
        out = T.elementwise_binary([1.0], [0.0], "div")
    assert out.data[0] == np.inf


def test_per_channel_vector_broadcasts_over_spatial_axes():
    x = np.zeros((2, 3, 4, 4))
    out = T.add(x, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out.data[1, :, 2, 3], [1, 2, 3])


def test_broadcast_failure():
    with pytest.raises(ShapeError):
        T.add(np.zeros((2, 3)), np.zeros((4, 5)))


def test_unknown_binary_kind():
    with pytest.raises(ValueError):
        T.elementwise_binary([1], [2], "pow")


def test_conv_identity_kernel():
    x = rand((1, 1, 4, 4))
    assert np.array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_conv_ones_center_value():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), padding=1)


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))


def test_conv_matches_direct_loops():
    x, k = rand((2, 3, 5, 5), seed=1), rand((4, 3, 3, 3), seed=2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * k[o])
    assert np.allclose(T.conv2d(x, k, padding=1).data, ref, atol=1e-12)


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [6.0])


def test_backward_product_rule():
    a, b = Tensor([2.0], requires_grad=True), Tensor([5.0], requires_grad=True)
    (a * b).sum().backward()
    assert a.grad[0] == 5.0 and b.grad[0] == 2.0


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_two_consumers_accumulate():
    x = Tensor([1.5], requires_grad=True)
    y = x * 2.0
    (y * y + T.exp(y)).sum().backward()
    assert np.allclose(x.grad, [8 * 1.5 + 2 * np.exp(3.0)])


def test_grads_accumulate_across_backward_calls():
    x = Tensor([1.0], requires_grad=True)
    (x * 3).sum().backward()
    (x * 3).sum().backward()
    assert x.grad[0] == 6.0


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_reductions():
    assert T.reduce(Tensor([[1, 2], [3, 4]]), "sum").item() == 10
    c = np.full((2, 3, 4, 4), 2.5)
    assert np.allclose(T.reduce(c, "channel_mean").data, 2.5)
    alt = np.zeros((1, 2, 2, 2))
    alt[..., 0, 0] = alt[..., 1, 1] = 2.0
    assert np.allclose(T.reduce(alt, "channel_std").data, 1.0)


def test_channel_reduction_rank_check():
    with pytest.raises(ShapeError):
        T.channel_mean(np.zeros((3, 3)))


# -- gradient oracle per op ---------------------------------------------------------------


UNARY = {
    "neg": T.neg,
    "exp": T.exp,
    "tanh": T.tanh,
    "relu": T.relu,
    "softplus": T.softplus,
    "power3": lambda a: T.power(a, 3.0),
    "sum_axis": lambda a: T.tsum(a, axis=1),
    "mean": lambda a: T.tmean(a, axis=(0, 2), keepdims=True),
    "reshape": lambda a: T.reshape(a, (3, -1)),
    "transpose": lambda a: T.transpose(a, (2, 0, 1)),
    "getitem_slice": lambda a: T.getitem(a, (slice(1, 3), 0)),
    "getitem_fancy": lambda a: T.getitem(a, ([0, 0, 2], [1, 1, 0])),
    "take": lambda a: T.take(a, [2, 0, 2], 1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x = rand((3, 4, 2), seed=sum(map(ord, name)))
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    grad_check(UNARY[name], x)


@pytest.mark.parametrize("name,fn", [("log", T.log), ("sqrt", T.sqrt)])
def test_positive_domain_gradients(name, fn):
    grad_check(fn, rand((3, 4), 0.2, 2.0, seed=4))


def test_abs_gradient():
    x = rand((10,), seed=5)
    grad_check(T.tabs, np.where(np.abs(x) < 1e-3, 0.3, x))


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_gradients(kind):
    a, b = rand((2, 3, 2, 2), seed=6), rand((2, 3, 2, 2), 0.5, 2.0, seed=7)
    grad_check(lambda x, y: T.elementwise_binary(x, y, kind), a, b)
    # per-channel and scalar broadcasting
    grad_check(lambda x, y: T.elementwise_binary(x, y, kind), a, rand((3,), 0.5, 2.0, seed=8))
    grad_check(lambda x, y: T.elementwise_binary(x, y, kind), a, rand((1,), 0.5, 2.0, seed=9))


def test_matmul_gradient():
    grad_check(T.matmul, rand((3, 4), seed=10), rand((4, 2), seed=11))


def test_concat_gradient():
    grad_check(lambda a, b: T.concat([a, b], axis=1), rand((2, 3), seed=12), rand((2, 1), seed=13))


@pytest.mark.parametrize("ksize,pad", [(3, 1), (1, 0), (3, 0), (5, 2)])
def test_conv2d_gradients(ksize, pad):
    grad_check(lambda x, k: T.conv2d(x, k, pad), rand((2, 2, 5, 5), seed=14),
               rand((3, 2, ksize, ksize), seed=15))


def test_channel_stat_gradients():
    x = rand((2, 3, 2, 2), seed=16)
    grad_check(T.channel_mean, x)
    grad_check(T.channel_std, x)


def test_five_layer_chain_gradient():
    rng = np.random.default_rng(17)
    ws = [rng.normal(0, 0.6, (4, 4)) for _ in range(5)]

    def net(x, *weights):
        h = x
        for i, w in enumerate(weights):
            h = T.matmul(h, w)
            h = T.tanh(h) if i % 2 == 0 else T.softplus(h)
        return h

    grad_check(net, rand((3, 4), seed=18), *ws)


# -- properties -----------------------------------------------------------------------------


finite = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_matches_numpy(a, b):
    assert np.array_equal(T.add(a, b).data, a + b)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 2, 3, 3), elements=finite))
def test_ops_are_deterministic(x):
    k = np.linspace(-1, 1, 2 * 2 * 9).reshape(2, 2, 3, 3)
    a = T.tanh(T.conv2d(x, k, 1)).data
    b = T.tanh(T.conv2d(x, k, 1)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite))
def test_grad_shape_matches_data(x):
    t = Tensor(x, requires_grad=True)
    T.tsum(T.exp(t) * t).backward()
    assert t.grad.shape == t.shape
