import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stkadapter import autograd as ag
from stkadapter.autograd import DimensionError, NumericalError, Parameter, Tensor, grad_check

TOL = 1e-4


def unary_cases(rng):
    x = lambda *s: Parameter(rng.normal(size=s))
    pos = Parameter(rng.uniform(0.5, 2.0, (3, 4)))
    away = Parameter(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.2, 1.5, (3, 4)))
    a3, b3 = x(2, 3, 4), x(2, 4, 5)
    g, bta = Parameter(rng.uniform(0.5, 1.5, 4)), x(4)
    table = x(6, 4)
    yield "add", lambda a=x(3, 4), b=x(4): ag.add(a, b), None
    yield "mul", lambda a=x(3, 4), b=x(3, 1): ag.mul(a, b), None
    yield "div", lambda a=x(3, 4), b=pos: ag.div(a, b), None
    yield "exp", lambda a=x(3, 4): ag.exp(a), None
    yield "log", lambda a=pos: ag.log(a), None
    yield "relu", lambda a=away: ag.relu(a), None
    yield "sigmoid", lambda a=x(3, 4): ag.sigmoid(a * 3.0), None
    yield "tanh", lambda a=x(3, 4): ag.tanh(a), None
    yield "gelu", lambda a=x(3, 4): ag.gelu(a), None
    yield "mean", lambda a=x(3, 4): ag.mean(a, axis=0), None
    yield "reshape_swap", lambda a=x(2, 3, 4): ag.swapaxes(ag.reshape(a, (6, 4)), 0, 1), None
    yield "concat", lambda a=x(3, 2), b=x(3, 4): ag.concat([a, b], axis=-1), None
    yield "stack", lambda a=x(3, 2), b=x(3, 2): ag.stack([a, b]), None
    yield "narrow", lambda a=x(2, 6, 3): ag.narrow(a, 1, 2, 5), None
    yield "take_rows", lambda t=table: ag.take_rows(t, [0, 3, 3, 5]), None
    yield "take_rows_batched", lambda a=x(2, 5, 3): ag.take_rows(a, [[0, 4], [2, 2]]), None
    yield "pick", lambda a=x(3, 4): ag.pick(a, [1, 0, 3]), None
    yield "put_rows", lambda a=x(5, 3), v=x(2, 3): ag.put_rows(a, [1, 4], v), None
    yield "segment_mean", lambda a=x(5, 3): ag.segment_mean(a, [0, 2, 2, 0, 2], 3), None
    yield "matmul_batched", lambda a=a3, b=b3: ag.matmul(a, b), None
    yield "matmul_broadcast", lambda a=a3, w=x(4, 2): ag.matmul(a, w), None
    yield "linear", lambda a=x(3, 4), w=x(4, 2), b=x(2): ag.linear(a, w, b), None
    yield "softmax", lambda a=x(3, 4): ag.softmax(a), None
    yield "log_softmax", lambda a=x(3, 4): ag.log_softmax(a), None
    yield "layer_norm", lambda a=x(3, 4), g=g, b=bta: ag.layer_norm(a, g, b), None
    yield "attention", lambda q=x(2, 3, 4), k=x(2, 5, 4), v=x(2, 5, 3): ag.scaled_dot_attention(q, k, v), None
    mask = ag.causal_mask(4)
    yield "attention_masked", lambda q=x(4, 2), k=x(4, 2), v=x(4, 3): ag.scaled_dot_attention(q, k, v, mask), None
    yield "cross_entropy", lambda a=x(3, 5): ag.cross_entropy(a, [0, 4, 2]), "scalar"


def _params_of(fn):
    return [v for v in fn.__defaults__ or () if isinstance(v, Parameter)]


@pytest.mark.parametrize("seed", range(5))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, fn, kind in unary_cases(rng):
        w = np.random.default_rng(seed + 100)
        if kind == "scalar":
            loss = fn
        else:
            shape = fn().shape
            weights = w.uniform(0.5, 1.5, shape)
            loss = lambda fn=fn, weights=weights: ag.sum_(ag.mul(fn(), weights))
        err = grad_check(loss, _params_of(fn))
        assert err < TOL, f"{name}: relative error {err:.2e}"


def test_gradients_accumulate_across_uses():
    a = Parameter(np.array([2.0, 3.0]))
    out = ag.sum_(a * a + a)
    out.backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_no_grad_builds_no_graph():
    a = Parameter(np.ones(3))
    with ag.no_grad():
        out = ag.sum_(a * 2.0)
    assert out._backward is None and not out.requires_grad


def test_softmax_is_stable_for_large_logits():
    out = ag.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0])))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = ag.softmax(Tensor(np.array(values))).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_linear_rejects_wrong_bias():
    with pytest.raises(DimensionError):
        ag.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))), Tensor(np.ones(3)))


def test_grad_check_rejects_bad_step():
    p = Parameter(np.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda: ag.sum_(p), [p], eps=1e-9)


def test_grad_check_flags_non_finite_output():
    p = Parameter(np.array([-1.0]))
    with np.errstate(invalid="ignore"), pytest.raises(NumericalError):
        grad_check(lambda: ag.sum_(ag.log(p)), [p])


def test_grad_check_detects_a_wrong_gradient():
    p = Parameter(np.array([0.3, -0.7]))

    def broken():
        out = ag.exp(p)
        # sabotage: claim the derivative is zero
        out._backward = lambda g: (np.zeros_like(g),)
        return ag.sum_(out)

    assert grad_check(broken, [p]) > 0.5
    with pytest.raises(AssertionError):
        grad_check(broken, [p], tolerance=TOL)


def test_grad_check_restores_parameters():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=(3, 3)))
    before = p.data.copy()
    grad_check(lambda: ag.sum_(ag.tanh(p)), [p])
    np.testing.assert_array_equal(p.data, before)


def test_linear_examples():
    np.testing.assert_array_equal(ag.linear(Tensor(np.array([[1.0, 2.0]])), Tensor(np.eye(2))).data, [[1, 2]])
    w = Tensor(np.array([[2.0, 0.0], [0.0, 3.0]]))
    np.testing.assert_array_equal(ag.linear(Tensor(np.array([[1.0, 0.0]])), w).data, [[2, 0]])
    with pytest.raises(DimensionError):
        ag.linear(Tensor(np.ones(3)), Tensor(np.eye(2)))


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ag.softmax(Tensor(np.array([1.0, 2.0]))).data, [0.2689, 0.7311], atol=1e-4)
    big = ag.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0


def test_attention_examples():
    rng = np.random.default_rng(0)
    v1 = rng.normal(size=(1, 3))
    out = ag.scaled_dot_attention(Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(1, 2))), Tensor(v1))
    np.testing.assert_allclose(out.data, np.repeat(v1, 4, axis=0))
    v = rng.normal(size=(3, 2))
    out = ag.scaled_dot_attention(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0]] * 3)), Tensor(v))
    np.testing.assert_allclose(out.data, v.mean(axis=0, keepdims=True))
    # hand computation: logits q.k / sqrt(2)
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = np.array([[2.0, 0.0], [0.0, 0.0]])
    vv = np.array([[1.0, 0.0], [0.0, 1.0]])
    w0 = np.exp(2 / np.sqrt(2)) / (np.exp(2 / np.sqrt(2)) + 1)
    expected = np.array([[w0, 1 - w0], [0.5, 0.5]])
    np.testing.assert_allclose(ag.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(vv)).data, expected)


@pytest.mark.parametrize("seed", range(5))
def test_attention_is_convex_and_causal(seed):
    rng = np.random.default_rng(seed)
    q, k, v = (Tensor(rng.normal(size=(5, 4))) for _ in range(3))
    out = ag.scaled_dot_attention(q, k, v, ag.causal_mask(5)).data
    assert np.all(out <= v.data.max(axis=0) + 1e-12) and np.all(out >= v.data.min(axis=0) - 1e-12)
    np.testing.assert_allclose(out[0], v.data[0])
    # changing a future value row leaves earlier outputs alone
    v2 = v.data.copy()
    v2[3] += 10.0
    out2 = ag.scaled_dot_attention(q, k, Tensor(v2), ag.causal_mask(5)).data
    np.testing.assert_array_equal(out[:3], out2[:3])


def test_grad_check_square():
    p = Parameter(np.array([3.0]))
    assert grad_check(lambda: ag.sum_(p * p), [p]) < 1e-7


def test_grad_check_composites():
    rng = np.random.default_rng(1)
    x, w, b = Parameter(rng.normal(size=(3, 4))), Parameter(rng.normal(size=(4, 4))), Parameter(rng.normal(size=4))
    weights = rng.uniform(0.5, 1.5, (3, 4))
    assert grad_check(lambda: ag.sum_(ag.linear(x, w, b) * weights), [x, w, b]) < 1e-4
    assert grad_check(lambda: ag.cross_entropy(ag.linear(x, w, b), [0, 1, 3]), [x, w, b]) < 1e-4


def test_forward_backward_is_deterministic():
    grads = []
    for _ in range(2):
        p = Parameter(np.arange(9.0).reshape(3, 3) / 9)
        ag.sum_(ag.gelu(ag.matmul(p, p))).backward()
        grads.append(p.grad.copy())
    np.testing.assert_array_equal(*grads)
