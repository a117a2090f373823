import math

import numpy as np
import pytest

import numerics as nx
from numerics import Tensor
from errors import LabelError, ShapeError

H = 1e-5
TOLERANCE = 1e-4


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def relative_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return np.max(np.abs(analytic - numeric)) / scale


def numeric_grad(fn, tensor):
    grad = np.zeros_like(tensor.data)
    with nx.no_grad():
        for index in np.ndindex(tensor.shape):
            original = tensor.data[index]
            tensor.data[index] = original + H
            plus = fn().item()
            tensor.data[index] = original - H
            minus = fn().item()
            tensor.data[index] = original
            grad[index] = (plus - minus) / (2 * H)
    return grad


def check_gradients(fn, tensors):
    for t in tensors:
        t.grad = None
    nx.backward(fn())
    for t in tensors:
        assert t.grad is not None
        assert relative_error(t.grad, numeric_grad(fn, t)) < TOLERANCE


def project(out, seed=99):
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    weights = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return nx.sum_(nx.mul(out, weights))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_add_mul_broadcast_grad(rng):
    a, b, c = param(rng, 3, 4), param(rng, 4), param(rng, 3, 1)
    check_gradients(lambda: project(nx.mul(nx.add(a, b), c)), [a, b, c])


def test_structural_ops_grad(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 2, 5, 4)

    def fn():
        joined = nx.concat([a, b], axis=-2)
        moved = nx.transpose(joined, (0, 2, 1))
        flat = nx.reshape(moved, (2, 32))
        picked = nx.take(flat, [0, 3, 3, 31], axis=1)
        return nx.add(nx.mean(picked), project(nx.sum_(flat, axis=0)))
    check_gradients(fn, [a, b])


def test_matmul_batched_grad(rng):
    a, b = param(rng, 2, 3, 4, 5), param(rng, 5, 2)
    check_gradients(lambda: project(nx.matmul(a, b)), [a, b])


def test_linear_layer_norm_grad(rng):
    x, w, bias = param(rng, 2, 3, 6), param(rng, 4, 6), param(rng, 4)
    gamma, beta = param(rng, 4), param(rng, 4)
    check_gradients(lambda: project(nx.layer_norm(nx.linear(x, w, bias), gamma, beta)), [x, w, bias, gamma, beta])


@pytest.mark.parametrize('name', ['gelu', 'relu', 'tanh'])
def test_nonlinearity_grad(rng, name):
    x = param(rng, 4, 5)
    check_gradients(lambda: project(nx.NONLINEARITIES[name](x)), [x])


def test_softmax_and_log_softmax_grad(rng):
    x, y = param(rng, 3, 5), param(rng, 2, 4)
    check_gradients(lambda: nx.add(project(nx.softmax(x)), project(nx.log_softmax(y), seed=7)), [x, y])


def test_embedding_grad_with_repeated_ids(rng):
    table = param(rng, 6, 3)
    check_gradients(lambda: project(nx.embedding(table, [[1, 4, 1], [0, 5, 4]])), [table])


def test_cross_entropy_masked_grad(rng):
    logits = param(rng, 2, 4, 7)
    target = rng.integers(0, 7, size=(2, 4))
    mask = np.array([[1, 1, 0, 1], [0.5, 0, 1, 1]])
    check_gradients(lambda: nx.cross_entropy(logits, target, mask=mask), [logits])


def test_cross_entropy_uniform_is_log_classes():
    loss = nx.cross_entropy(Tensor(np.zeros(4)), 2)
    assert loss.item() == pytest.approx(math.log(4))


def test_cross_entropy_masked_positions_do_not_count():
    logits = Tensor(np.array([[0.0, 0.0], [50.0, -50.0]]))
    full = nx.cross_entropy(logits, [0, 1], mask=[1, 0]).item()
    assert full == pytest.approx(math.log(2))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(LabelError):
        nx.cross_entropy(Tensor(np.zeros(3)), 3)
    with pytest.raises(ShapeError):
        nx.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1, 2])


def test_softmax_of_minus_inf_is_exact_zero():
    out = nx.softmax(Tensor(np.array([0.0, -np.inf, 0.0]))).numpy()
    np.testing.assert_array_equal(out, [0.5, 0.0, 0.5])


def test_softmax_is_stable_for_large_inputs():
    out = nx.softmax(Tensor(np.array([1000.0, 1000.0]))).numpy()
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_layer_norm_of_constant_row_is_beta():
    x = Tensor(np.full((2, 4), 3.0))
    beta = Tensor(np.arange(4.0))
    out = nx.layer_norm(x, Tensor(np.ones(4)), beta).numpy()
    np.testing.assert_allclose(out, np.tile(np.arange(4.0), (2, 1)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r'\(2, 3\).*\(4, 5\)'):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_gradients_accumulate_until_zero_grad(rng):
    x = param(rng, 3)
    nx.backward(nx.sum_(x))
    nx.backward(nx.sum_(x))
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))
    nx.zero_grad([x])
    assert x.grad is None


def test_backward_clears_tape_and_rejects_non_scalars(rng):
    x = param(rng, 3)
    loss = nx.sum_(nx.mul(x, x))
    nx.backward(loss)
    assert loss._parents == ()
    with pytest.raises(ShapeError):
        nx.backward(nx.mul(x, x))


def test_no_grad_records_nothing(rng):
    x = param(rng, 3)
    with nx.no_grad():
        y = nx.sum_(x)
    assert not y.requires_grad
    with pytest.raises(ShapeError):
        nx.backward(y)


def test_sgd_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    nx.optimizer_step([p], nx.create_optimizer([p], kind='sgd', learning_rate=0.1))
    assert p.data[0] == pytest.approx(0.8)


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    p.grad = np.array([2.0, -0.5])
    state = nx.create_optimizer([p], kind='adam', learning_rate=0.1)
    nx.optimizer_step([p], state)
    np.testing.assert_allclose(p.data, [0.9, 1.1], atol=1e-6)
    assert state.step_count == 1


def test_optimizer_step_requires_gradients():
    p = Tensor(np.zeros(2), requires_grad=True, name='w')
    with pytest.raises(ShapeError, match='w'):
        nx.optimizer_step([p], nx.create_optimizer([p], kind='sgd', learning_rate=0.1))


@pytest.mark.parametrize('dtype', [np.float32, np.float64])
def test_scalar_results_keep_precision(dtype):
    x = Tensor(np.array([1.0, 2.0, 3.0], dtype=dtype), requires_grad=True)
    s = x.mean()
    assert s.dtype == dtype
    assert nx.add(s, s).dtype == dtype
    assert (s * 0.5).dtype == dtype
    assert ((s + s) * 0.5 - s).dtype == dtype
    assert nx.cross_entropy(Tensor(np.zeros((2, 3), dtype=dtype)), [0, 1]).dtype == dtype


def test_float64_mean_resolves_tiny_steps():
    x = Tensor(np.array([1.0, 2.0], dtype=np.float64))
    bumped = Tensor(np.array([1.0 + 1e-9, 2.0], dtype=np.float64))
    assert (bumped.mean() * 0.5).item() != (x.mean() * 0.5).item()
