import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dhcnet.tensor import (Tensor, add, backward, elementwise, grad_check, log, matmul, mul, reduce,
                           relu, tape)


def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_add_values():
    assert add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    backward(mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_log_domain_error():
    with pytest.raises(ValueError, match="domain"):
        log(Tensor([1.0, 0.0]))


def test_trailing_broadcast_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(reduce("sum", mul(a, b)))
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(a.grad, [[1, 2, 3], [1, 2, 3]])


def test_elementwise_dispatch():
    assert elementwise("max_with_scalar", Tensor([-2.0, 5.0]), 1.0).data.tolist() == [1.0, 5.0]
    assert elementwise("neg", Tensor([2.0])).data.tolist() == [-2.0]
    with pytest.raises(ValueError):
        elementwise("pow", Tensor([1.0]), 2.0)


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]])).data.tolist() == [[2.0]]
    with pytest.raises(ValueError, match="inner"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    f = lambda t: reduce("sum", mul(matmul(t, Tensor(b)), w))
    g = lambda t: reduce("sum", mul(matmul(Tensor(a), t), w))
    assert grad_check(f, a, 1e-5) <= 1e-6
    assert grad_check(g, b, 1e-5) <= 1e-6


def test_reduce_examples():
    assert reduce("mean", Tensor([2.0, 4.0])).item() == 3.0
    x = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(reduce("sum", x, ()).data, x.data)
    with pytest.raises(ValueError, match="axis"):
        reduce("sum", x, 2)


def test_mean_gradient_is_uniform():
    x = Tensor(np.arange(5.0), requires_grad=True)
    backward(reduce("mean", x))
    np.testing.assert_allclose(x.grad, np.full(5, 0.2))


def test_backward_sum_and_fanout():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(reduce("sum", x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor(1.5, requires_grad=True)
    backward(add(y, y))
    assert y.grad == 2.0


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(mul(x, 2.0))
    with pytest.raises(ValueError, match="detached"):
        backward(reduce("sum", Tensor([1.0, 2.0])))


def test_backward_returns_map_keyed_by_node():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = reduce("sum", mul(x, 3.0))
    grads = backward(y)
    np.testing.assert_array_equal(grads[x.node_id], [3.0, 3.0])


def test_tape_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = reduce("sum", mul(add(x, x), x))
    nodes = tape(y)
    pos = {n.node_id: i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[p.node_id] < pos[n.node_id]
    assert len({n.node_id for n in nodes}) == len(nodes)


def test_backward_is_deterministic(rng):
    data = rng.normal(size=(4, 4))

    def grads():
        x = Tensor(data, requires_grad=True)
        backward(reduce("sum", mul(relu(matmul(x, x)), x)))
        return x.grad

    assert grads().tobytes() == grads().tobytes()


def test_grad_check_polynomial():
    assert grad_check(lambda t: reduce("sum", mul(t, t)), np.array([3.0]), 1e-5) <= 1e-8


def test_grad_check_skips_relu_kink():
    assert grad_check(lambda t: reduce("sum", relu(t)), np.array([0.0, 1.0, -1.0]), 1e-5) <= 1e-9


def test_grad_check_epsilon_range():
    with pytest.raises(ValueError):
        grad_check(lambda t: reduce("sum", t), np.ones(2), 1e-2)


def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda t: reduce("sum", mul(t, 1e308 * 10)), np.ones(1), 1e-5)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(-5, 5)), arrays(np.float64, (3,), elements=st.floats(-5, 5)))
def test_fanout_doubles_gradient(xv, wv):
    def grad_of(double):
        x = Tensor(xv, requires_grad=True)
        h = add(x, x) if double else x
        backward(reduce("sum", mul(h, wv)))
        return x.grad

    np.testing.assert_allclose(grad_of(True), 2 * grad_of(False))
