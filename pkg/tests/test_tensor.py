import zlib

import numpy as np
import pytest

from capsprobe import tensor as T
from capsprobe.tensor import Tensor
from helpers import gradcheck, weighted_sum

GRAD_TOL = 1e-4


def u(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_selector_row():
    out = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[5.0], [7.0]])
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_gradient_tight(rng):
    a, b = u(rng, 3, 4), u(rng, 4, 2)
    assert gradcheck(lambda x, y: weighted_sum(x @ y), [a, b]) < 1e-6


def test_matmul_grad_rules(rng):
    a, b = u(rng, 3, 4), u(rng, 4, 2)
    g = u(rng, 3, 2)
    ta, tb = Tensor(a, True), Tensor(b, True)
    T.backward(T.sum_(T.matmul(ta, tb) * Tensor(g)))
    np.testing.assert_allclose(ta.grad, g @ b.T, rtol=1e-14)
    np.testing.assert_allclose(tb.grad, a.T @ g, rtol=1e-14)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- conv2d


def conv_oracle(x, k, stride):
    """Direct six-loop cross-correlation."""
    C, H, W = x.shape
    F, _, P, Q = k.shape
    Ho, Wo = (H - P) // stride + 1, (W - Q) // stride + 1
    out = np.zeros((F, Ho, Wo))
    for f in range(F):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for p in range(P):
                        for q in range(Q):
                            acc += x[c, i * stride + p, j * stride + q] * k[f, c, p, q]
                out[f, i, j] = acc
    return out


def test_conv_scaling():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_full_window_sum():
    x = np.eye(3)[None]
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == x.sum()


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle_integer_inputs(stride):
    rng = np.random.default_rng(stride)
    x = rng.integers(-5, 6, size=(2, 5, 5)).astype(float)
    k = rng.integers(-3, 4, size=(3, 2, 3, 3)).astype(float)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), stride=stride).data, conv_oracle(x, k, stride))


def test_conv_matches_loop_oracle_random(rng):
    x, k = u(rng, 2, 5, 5), u(rng, 3, 2, 3, 3)
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, conv_oracle(x, k, 1), rtol=0, atol=1e-14)


def test_conv_batched_equals_per_image(rng):
    x, k = u(rng, 3, 2, 6, 6), u(rng, 4, 2, 3, 3)
    batched = T.conv2d(Tensor(x), Tensor(k), stride=1).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], T.conv2d(Tensor(x[i]), Tensor(k)).data)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(rng, stride):
    x, k, b = u(rng, 2, 2, 5, 5), u(rng, 3, 2, 3, 3), u(rng, 3)
    f = lambda x, k, b: weighted_sum(T.conv2d(x, k, b, stride=stride))
    assert gradcheck(f, [x, k, b]) < GRAD_TOL


def test_conv_kernel_larger_than_input():
    with pytest.raises(T.ShapeError, match="larger"):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------- max_pool


def pool_oracle(x, s):
    C, H, W = x.shape
    out = np.zeros((C, H // s, W // s))
    for c in range(C):
        for i in range(H // s):
            for j in range(W // s):
                out[c, i, j] = max(x[c, i * s + p, j * s + q] for p in range(s) for q in range(s))
    return out


def test_pool_example():
    assert T.max_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2).data.tolist() == [[[4.0]]]


def test_pool_matches_window_scan(rng):
    x = u(rng, 1, 4, 4)
    np.testing.assert_array_equal(T.max_pool(Tensor(x), 2).data, pool_oracle(x, 2))


def test_pool_ties_route_to_top_left():
    x = Tensor(np.full((1, 4, 4), 3.0), requires_grad=True)
    out = T.max_pool(x, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 3.0))
    T.backward(T.sum_(out))
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_pool_gradient(rng):
    x = u(rng, 2, 2, 4, 6)
    assert gradcheck(lambda x: weighted_sum(T.max_pool(x, 2)), [x]) < GRAD_TOL


def test_pool_non_divisible():
    with pytest.raises(T.ShapeError, match="divide"):
        T.max_pool(Tensor(np.ones((1, 5, 4))), 2)


# ---------------------------------------------------------------- relu / softmax


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 3.0])).data, [0.0, 3.0])


def test_softmax_uniform_row():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4)), axis=0).data, [0.25] * 4)


def test_softmax_gradient_tight(rng):
    x = u(rng, 5)
    assert gradcheck(lambda x: weighted_sum(T.softmax(x, axis=0)), [x]) < 1e-6


def test_softmax_stable_for_large_logits():
    out = T.softmax(Tensor([1000.0, 1000.0, -1000.0]), axis=0).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-300)


def test_softmax_invalid_axis():
    with pytest.raises(T.ShapeError, match="axis"):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


# ---------------------------------------------------------------- every differentiable op

OPS = {
    "add": (lambda a, b: weighted_sum(a + b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: weighted_sum(a - b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: weighted_sum(a * b), [(3, 4), (3, 4)]),
    "div": (lambda a, b: weighted_sum(a / (T.exp(b) + 1.0)), [(3, 4), (3, 4)]),
    "scalar-mul": (lambda a: weighted_sum(a * 2.5 - 1.0), [(3,)]),
    "neg": (lambda a: weighted_sum(-a), [(4,)]),
    "pow": (lambda a: weighted_sum((T.exp(a)) ** 1.5), [(4,)]),
    "exp": (lambda a: weighted_sum(T.exp(a)), [(2, 3)]),
    "log": (lambda a: weighted_sum(T.log(T.exp(a) + 0.5)), [(2, 3)]),
    "sqrt": (lambda a: weighted_sum(T.sqrt(T.exp(a))), [(5,)]),
    "relu": (lambda a: weighted_sum(T.relu(a)), [(3, 3)]),
    "sigmoid": (lambda a: weighted_sum(T.sigmoid(a)), [(3, 3)]),
    "tanh": (lambda a: weighted_sum(T.tanh(a)), [(3, 3)]),
    "gelu": (lambda a: weighted_sum(T.gelu(a)), [(3, 3)]),
    "clamp_min": (lambda a: weighted_sum(T.clamp_min(a, 0.1)), [(3, 3)]),
    "sum-axis": (lambda a: weighted_sum(T.sum_(a, axis=1)), [(2, 3, 4)]),
    "mean-keepdims": (lambda a: weighted_sum(T.mean(a, axis=(0, 2), keepdims=True)), [(2, 3, 4)]),
    "reshape": (lambda a: weighted_sum(T.reshape(a, (4, 3))), [(2, 6)]),
    "transpose": (lambda a: weighted_sum(T.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    "broadcast_to": (lambda a: weighted_sum(T.broadcast_to(a, (2, 3, 4))), [(3, 1)]),
    "index": (lambda a: weighted_sum(a[np.array([0, 2, 0]), 1:]), [(3, 4)]),
    "concat": (lambda a, b: weighted_sum(T.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: weighted_sum(T.stack([a, b], axis=1)), [(2, 3), (2, 3)]),
    "batched-matmul": (lambda a, b: weighted_sum(a @ b), [(2, 3, 4), (2, 4, 2)]),
    "linear": (lambda x, w, b: weighted_sum(T.linear(x, w, b)), [(3, 4), (4, 2), (2,)]),
    "einsum-contract": (lambda a, b: weighted_sum(T.einsum("bni,nmdi->bnmd", a, b)), [(2, 3, 2), (3, 2, 4, 2)]),
    "einsum-private": (lambda a, b: weighted_sum(T.einsum("bni,mdi->bmd", a, b)), [(2, 3, 2), (2, 4, 2)]),
    "softmax": (lambda a: weighted_sum(T.softmax(a, axis=1)), [(3, 4)]),
    "log_softmax": (lambda a: weighted_sum(T.log_softmax(a, axis=0)), [(3, 4)]),
    "layer_norm": (lambda x, g, b: weighted_sum(T.layer_norm(x, g, b)), [(2, 3, 5), (5,), (5,)]),
    "vector_norm": (lambda a: weighted_sum(T.vector_norm(a, axis=1)), [(3, 4)]),
    "squash": (lambda a: weighted_sum(T.squash(a, axis=-1)), [(3, 2, 4)]),
    "squash-axis0": (lambda a: weighted_sum(T.squash(a * 3.0, axis=0)), [(4, 3)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, np.array([0, 2, 1])), [(3, 4)]),
    "mse": (lambda a, b: T.mse(a, b), [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    f, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.uniform(-1, 1, size=s) for s in shapes]
    assert gradcheck(f, arrays) < GRAD_TOL


def test_squash_zero_vector_is_zero_with_zero_gradient():
    s = Tensor(np.zeros((1, 3)), requires_grad=True)
    out = T.squash(s)
    np.testing.assert_array_equal(out.data, 0.0)
    T.backward(T.sum_(out))
    assert np.all(np.isfinite(s.grad))


# ---------------------------------------------------------------- broadcasting rules


def test_no_implicit_broadcasting():
    with pytest.raises(T.ShapeError, match="broadcast"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((2, 3))) * np.ones(3)


def test_scalar_broadcasting_allowed():
    np.testing.assert_array_equal((Tensor(np.ones((2, 2))) * 3.0).data, np.full((2, 2), 3.0))
    np.testing.assert_array_equal((2.0 - Tensor(np.ones(2))).data, [1.0, 1.0])


# ---------------------------------------------------------------- finiteness


def test_non_finite_rejected_at_creation():
    with pytest.raises(T.NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(T.NonFiniteError):
        Tensor([np.inf])


def test_debug_mode_flags_non_finite_op_output():
    T.set_debug(True)
    try:
        with pytest.raises(T.NonFiniteError, match="log"), np.errstate(divide="ignore"):
            T.log(Tensor([0.0]))
    finally:
        T.set_debug(False)


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    T.backward(x * x)
    assert x.grad == 6.0


def test_backward_relu_sum():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    T.backward(T.sum_(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(T.BackwardError, match="scalar"):
        T.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)


def test_backward_rejects_detached():
    with pytest.raises(T.BackwardError, match="detached"):
        T.backward(T.sum_(Tensor(np.ones(2))))


def test_backward_twice_is_an_error():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    T.backward(y)
    with pytest.raises(T.BackwardError):
        T.backward(y)


def test_tape_is_topological_and_visits_each_node_once(rng):
    x = Tensor(u(rng, 3), requires_grad=True)
    a = T.exp(x)
    b = a * a  # shared input
    c = T.sum_(b + a)
    tape = T.backward(c)
    pos = {id(t): i for i, t in enumerate(tape.entries)}
    assert len(pos) == len(tape.entries)
    for t in tape.entries:
        if t.node is not None:
            for p in t.node.inputs:
                assert pos[id(p)] < pos[id(t)]
    assert tape.visits == len(tape.entries) == 5  # x, a, b, b + a, c
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data) + np.exp(x.data))


def test_no_grad_builds_no_graph():
    x = Tensor(1.0, requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


# ---------------------------------------------------------------- sgd


def test_sgd_single_step():
    p = Tensor(1.0, requires_grad=True)
    p.grad = np.array(2.0)
    T.sgd_step([p], 0.1)
    assert p.data == pytest.approx(0.8, abs=1e-15)
    assert p.grad is None


def test_sgd_zero_lr_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([5.0, 5.0])
    T.sgd_step([p], 0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_missing_grad():
    with pytest.raises(T.BackwardError, match="gradient"):
        T.sgd_step([Tensor(1.0, requires_grad=True)], 0.1)


def test_sgd_converges_on_quadratic():
    # f(p) = 2 (p - 3)^2 has its minimum at p = 3
    p = Tensor(-4.0, requires_grad=True)
    for _ in range(50):
        d = p - 3.0
        T.backward(d * d * 2.0)
        T.sgd_step([p], 0.2)
    assert abs(p.item() - 3.0) < 1e-6


def test_adam_decreases_loss(rng):
    w = Tensor(u(rng, 4), requires_grad=True)
    target = Tensor(u(rng, 4))
    opt = T.Adam([w], lr=0.05)
    first = None
    for _ in range(100):
        loss = T.mse(w, target)
        first = loss.item() if first is None else first
        T.backward(loss)
        opt.step()
    assert T.mse(w, target).item() < 1e-3 * first
