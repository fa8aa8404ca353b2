import numpy as np
import pytest

from cmdrnn import tensor as T
from cmdrnn.gradcheck import check_gradients, relative_error
from cmdrnn.tensor import DomainError, NonFiniteError, ShapeError


def value(node):
    return np.asarray(node.value)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(np.eye(2), [[3.0], [4.0]])
    np.testing.assert_array_equal(value(out), [[3.0], [4.0]])


def test_matmul_hand_product():
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    # 1*5+2*7, 1*6+2*8 / 3*5+4*7, 3*6+4*8
    np.testing.assert_array_equal(value(out), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_zero():
    rng = np.random.default_rng(0)
    out = T.matmul(np.zeros((3, 4)), rng.standard_normal((4, 5)))
    np.testing.assert_array_equal(value(out), np.zeros((3, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_rules():
    rng = np.random.default_rng(1)
    a = T.parameter(rng.standard_normal((3, 4)))
    b = T.parameter(rng.standard_normal((4, 2)))
    upstream = rng.standard_normal((3, 2))
    grads = T.backward(T.sum(T.matmul(a, b) * upstream))
    np.testing.assert_allclose(grads[a], upstream @ b.value.T)
    np.testing.assert_allclose(grads[b], a.value.T @ upstream)


# -- elementwise ------------------------------------------------------------


def test_activation_values():
    assert value(T.sigmoid(0.0)) == 0.5
    assert value(T.relu(-1.0)) == 0.0
    assert value(T.relu(2.0)) == 2.0
    assert value(T.leaky_relu(-2.0)) == pytest.approx(-0.02, abs=1e-15)
    assert value(T.leaky_relu(3.0)) == 3.0


def test_sigmoid_extreme_inputs_stay_finite():
    out = value(T.sigmoid(np.array([-800.0, 0.0, 800.0])))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


@pytest.mark.parametrize("op", [T.log, T.sqrt])
def test_domain_errors(op):
    with pytest.raises(DomainError):
        op(np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        op(np.array([-1.0]))


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.add(np.ones(3), np.ones((1, 3)))
    out = T.mul(np.arange(1.0, 4.0), 2.0)
    np.testing.assert_array_equal(value(out), [2.0, 4.0, 6.0])


def test_scalar_broadcast_gradient_sums():
    s = T.parameter(2.0)
    x = T.parameter(np.array([1.0, 2.0, 3.0]))
    grads = T.backward(T.sum(x * s))
    assert grads[s] == pytest.approx(6.0)
    np.testing.assert_allclose(grads[x], [2.0, 2.0, 2.0])


def test_elementwise_dispatch():
    assert value(T.elementwise("square", 3.0)) == 9.0
    with pytest.raises(ValueError):
        T.elementwise("cube", 3.0)


def test_overflow_is_reported_with_op_name():
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(np.array([1000.0]))


# -- reductions -------------------------------------------------------------


def test_reductions():
    assert value(T.sum(np.array([1.0, 2.0, 3.0]))) == 6.0
    assert value(T.mean(np.array([2.0, 4.0]))) == 3.0
    np.testing.assert_array_equal(value(T.reduce("max", np.array([[1.0, 7.0], [4.0, 2.0]]), 0)), [4.0, 7.0])


def test_max_ties_route_to_lowest_index():
    x = T.parameter(np.array([1.0, 5.0, 5.0]))
    grads = T.backward(T.max(x))
    np.testing.assert_array_equal(grads[x], [0.0, 1.0, 0.0])

    m = T.parameter(np.array([[3.0, 3.0], [1.0, 2.0]]))
    grads = T.backward(T.sum(T.max(m, axis=1)))
    np.testing.assert_array_equal(grads[m], [[1.0, 0.0], [0.0, 1.0]])


def test_reduce_axis_out_of_range():
    with pytest.raises(ShapeError):
        T.sum(np.ones((2, 2)), axis=2)


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        T.constant(np.ones((0, 3)))


# -- backward ---------------------------------------------------------------


def test_backward_sum_of_squares():
    x = T.parameter(np.array([1.0, 2.0, 3.0]))
    grads = T.backward(T.sum(T.square(x)))
    np.testing.assert_array_equal(grads[x], [2.0, 4.0, 6.0])


def test_backward_sigmoid_matmul_matches_central_differences():
    rng = np.random.default_rng(7)
    w = T.parameter(rng.standard_normal((3, 3)))
    x = T.constant(rng.standard_normal((3, 1)))
    err = check_gradients(lambda: T.sum(T.sigmoid(T.matmul(w, x))), [w], eps=1e-5)
    assert err < 1e-6


def test_constant_loss_gives_zero_gradient():
    w = T.parameter(np.ones((2, 2)))
    loss = T.sum(T.constant(np.array([1.0, 2.0])))
    grads = T.backward(loss, [w])
    np.testing.assert_array_equal(grads[w], np.zeros((2, 2)))


def test_unreachable_parameter_grad_is_reset():
    w = T.parameter(np.ones(2))
    T.backward(T.sum(w * 3.0))
    grads = T.backward(T.sum(T.constant(np.ones(2))), [w])
    np.testing.assert_array_equal(grads[w], [0.0, 0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.parameter(np.ones(3)) * 2.0)


def test_backward_reports_non_finite_gradient():
    x = T.parameter(np.ones(2))
    bad = T.make_node("broken_op", x.value.copy(), (x,), lambda g: (g * np.nan,))
    with pytest.raises(NonFiniteError, match="broken_op"):
        T.backward(T.sum(bad))


def test_backward_linearity():
    rng = np.random.default_rng(3)
    w = T.parameter(rng.standard_normal((4, 3)))
    x = T.constant(rng.standard_normal((3, 2)))

    def loss_a():
        return T.sum(T.tanh(T.matmul(w, x)))

    def loss_b():
        return T.mean(T.square(T.matmul(w, x)))

    ga = T.backward(loss_a(), [w])[w].copy()
    gb = T.backward(loss_b(), [w])[w].copy()
    gsum = T.backward(loss_a() + loss_b(), [w])[w]
    np.testing.assert_allclose(gsum, ga + gb, rtol=1e-12, atol=1e-14)


def test_shared_node_accumulates():
    x = T.parameter(np.array([2.0]))
    y = x * x
    grads = T.backward(T.sum(y + y))
    np.testing.assert_allclose(grads[x], [8.0])


def test_forward_is_deterministic():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((5, 7))
    x = rng.standard_normal((7, 3))

    def run():
        return value(T.logsumexp(T.tanh(T.matmul(w, x)), axis=0)).tobytes()

    assert run() == run()


# -- randomized gradient checks for every op --------------------------------

SEEDS = range(20)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(rng, shape):
    # keep kinked ops (relu, leaky_relu, max) clear of their kinks
    x = rng.uniform(0.1, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


UNARY = {
    "exp": (T.exp, lambda r, s: r.standard_normal(s)),
    "log": (T.log, _positive),
    "sqrt": (T.sqrt, _positive),
    "square": (T.square, lambda r, s: r.standard_normal(s)),
    "tanh": (T.tanh, lambda r, s: r.standard_normal(s)),
    "sigmoid": (T.sigmoid, lambda r, s: r.standard_normal(s)),
    "relu": (T.relu, _away_from_zero),
    "leaky_relu": (T.leaky_relu, _away_from_zero),
    "transpose": (T.transpose, lambda r, s: r.standard_normal(s)),
    "sum_axis": (lambda a: T.sum(a, axis=1), lambda r, s: r.standard_normal(s)),
    "mean_axis": (lambda a: T.mean(a, axis=0), lambda r, s: r.standard_normal(s)),
    "max_axis": (lambda a: T.max(a, axis=1), lambda r, s: r.standard_normal(s)),
    "max_all": (T.max, lambda r, s: r.standard_normal(s)),
    "logsumexp": (lambda a: T.logsumexp(a, axis=1), lambda r, s: r.standard_normal(s)),
    "log_softmax": (lambda a: T.log_softmax(a, axis=1), lambda r, s: r.standard_normal(s)),
    "softmax": (lambda a: T.softmax(a, axis=0), lambda r, s: r.standard_normal(s)),
    "reshape": (lambda a: T.reshape(a, (a.value.size,)), lambda r, s: r.standard_normal(s)),
    "slice": (lambda a: T.slice_axis(a, 1, 1, 3), lambda r, s: r.standard_normal(s)),
    "select": (lambda a: T.select(a, 0, 1), lambda r, s: r.standard_normal(s)),
    "broadcast_to": (lambda a: T.broadcast_to(T.reshape(a, (1,) + a.shape), (3,) + a.shape),
                     lambda r, s: r.standard_normal(s)),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradcheck(name, seed):
    op, sampler = UNARY[name]
    rng = np.random.default_rng(seed)
    x = T.parameter(sampler(rng, (3, 4)))
    weights = T.constant(rng.standard_normal(op(x).shape))
    err = check_gradients(lambda: T.sum(op(x) * weights), [x])
    assert err < 1e-4


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "linear": lambda a, b: T.linear(a, b),
    "concat": lambda a, b: T.concat([a, b], axis=1),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    a = T.parameter(rng.standard_normal((3, 4)))
    b = T.parameter(rng.standard_normal((3, 4)))
    op = BINARY[name]
    weights = T.constant(rng.standard_normal(op(a, b).shape))
    err = check_gradients(lambda: T.sum(op(a, b) * weights), [a, b])
    assert err < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_add_bias_and_linear_with_bias_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = T.parameter(rng.standard_normal((5, 4)))
    w = T.parameter(rng.standard_normal((3, 4)))
    b = T.parameter(rng.standard_normal(3))
    c = T.parameter(rng.standard_normal(4))
    weights = T.constant(rng.standard_normal((5, 3)))
    err = check_gradients(lambda: T.sum(T.linear(T.add_bias(x, c), w, b) * weights), [x, w, b, c])
    assert err < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_scalar_tensor_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    s = T.parameter(rng.uniform(0.5, 1.5))
    x = T.parameter(rng.standard_normal(4))
    err = check_gradients(lambda: T.sum(T.square(x * s - s) + (s - x)), [s, x])
    assert err < 1e-4


def test_relative_error_helper():
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_error([0.0], [0.0]) == 0.0
    assert relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
