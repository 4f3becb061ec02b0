import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vectorfit import tensor as T
from vectorfit.errors import ContractError, DimensionError
from vectorfit.gradcheck import check_gradients
from vectorfit.tensor import Tensor


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_hand_product():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert np.array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.integers(-5, 5, (3, 4)).astype(float), rng.integers(-5, 5, (4, 2)).astype(float)
    assert np.array_equal(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_and_scale_rows():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    s = np.array([2.0, 3.0, 4.0])
    assert np.array_equal(T.scale_rows(Tensor(np.eye(3)), Tensor(s)).data, np.diag(s))


def test_scale_rows_matches_diag_matmul(rng):
    m, s = rng.standard_normal((4, 5)), rng.standard_normal(4)
    np.testing.assert_allclose(T.scale_rows(Tensor(m), Tensor(s)).data, np.diag(s) @ m, rtol=0, atol=1e-14)


def test_incompatible_broadcast_rejected():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_sum_and_square_grads():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum_(x).backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    y = Tensor([1.0, 2.0], requires_grad=True)
    T.sum_(T.mul(y, y)).backward()
    assert np.array_equal(y.grad, [2.0, 4.0])


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    h = T.mul(x, 2.0)
    T.sum_(T.add(h, h)).backward()
    assert np.array_equal(x.grad, [4.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.mul(x, 2.0).backward()


def test_constant_gets_no_grad():
    c = Tensor(np.ones(3))
    x = Tensor(np.ones(3), requires_grad=True)
    T.sum_(T.mul(x, c)).backward()
    assert c.grad is None


def test_graph_cleared_unless_retained():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum_(T.mul(x, x))
    loss.backward(retain_graph=True)
    loss.backward()
    assert np.array_equal(x.grad, [4.0, 8.0])
    assert loss._backward is None and loss._parents == ()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad


def test_softmax_and_cross_entropy_values():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    for c in (2, 5, 17):
        loss = T.cross_entropy(Tensor(np.zeros((3, c))), np.zeros(3, dtype=int))
        assert float(loss.data) == pytest.approx(math.log(c), abs=1e-12)


def test_softmax_is_stable_for_large_logits():
    out = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_cross_entropy_empty_classes():
    with pytest.raises(DimensionError):
        T.cross_entropy(Tensor(np.zeros((2, 0))), np.zeros(2, dtype=int))


GRAD_CASES = {
    "add_row": lambda r: ((a := param(r, 3, 4)), (b := param(r, 4)), lambda: T.sum_(T.mul(T.add(a, b), T.add(a, b)))),
    "mul": lambda r: ((a := param(r, 3, 4)), (b := param(r, 3, 4)), lambda: T.sum_(T.mul(a, b))),
    "matmul": lambda r: ((a := param(r, 3, 4)), (b := param(r, 4, 2)), lambda: T.sum_(T.tanh(T.matmul(a, b)))),
    "batched_matmul": lambda r: ((a := param(r, 2, 3, 4)), (b := param(r, 2, 4, 2)),
                                 lambda: T.sum_(T.tanh(T.matmul(a, b)))),
    "scale_rows": lambda r: ((a := param(r, 4, 3)), (b := param(r, 4)), lambda: T.sum_(T.tanh(T.scale_rows(a, b)))),
    "gelu_exp": lambda r: ((a := param(r, 5)), (b := param(r, 5)), lambda: T.sum_(T.mul(T.gelu(a), T.exp(b)))),
    "log_softmax": lambda r: ((a := param(r, 3, 6)), (b := param(r, 6)),
                              lambda: T.sum_(T.mul(T.log_softmax(T.add(a, b)), T.softmax(a)))),
    "transpose_reshape": lambda r: ((a := param(r, 2, 3, 4)), (b := param(r, 6, 4)),
                                    lambda: T.sum_(T.mul(T.reshape(T.transpose(a, (1, 0, 2)), (6, 4)), b))),
    "mean_relu": lambda r: ((a := param(r, 4, 4)), (b := param(r, 4)), lambda: T.mean(T.relu(T.add(a, b)))),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_ops(name):
    a, b, fn = GRAD_CASES[name](np.random.default_rng(7))
    assert max(check_gradients(fn, [a, b])) <= 1e-6


def test_gradcheck_cross_entropy_layernorm_embedding(rng):
    x = param(rng, 4, 6)
    gamma, beta = param(rng, 6), param(rng, 6)
    emb = param(rng, 5, 6)
    ids = np.array([0, 3, 3, 1])
    targets = np.array([1, 0, 5, 2])

    def loss():
        h = T.add(T.layernorm(x, gamma, beta), T.embedding(emb, ids))
        return T.cross_entropy(h, targets)

    assert max(check_gradients(loss, [x, gamma, beta, emb])) <= 1e-6


def test_abs_subgradient_at_zero():
    x = Tensor([0.0, -2.0, 3.0], requires_grad=True)
    T.sum_(T.abs_(x)).backward()
    assert np.array_equal(x.grad, [0.0, -1.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**16))
def test_matmul_gradcheck_random_shapes(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = param(r, n, k), param(r, k, m)
    errs = check_gradients(lambda: T.sum_(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b])
    assert max(errs) <= 1e-6
