import sys
import os
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import tensor as T
from errors import ContractError, DimensionError, DivergenceError, DomainError, LabelError
from rng import make_rng
from tensor import Tape, Tensor

RTOL = 1e-4


def param(rng, *shape, away_from_zero=False):
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.sign(data) * (np.abs(data) + 0.1)
    return Tensor(data, requires_grad=True)


def random_shape(rng, ndim=2):
    return tuple(int(s) for s in rng.integers(1, 5, size=ndim))


def test_matmul_identity():
    """Identity times a matrix is that matrix."""
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_selection_row():
    out = T.matmul(Tensor([[1, 0]]), Tensor([[2], [5]]))
    assert np.array_equal(out.data, [[2]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert '(2, 3)' in str(info.value)
    assert isinstance(info.value, ValueError)


def test_matmul_sum_gradient_is_row_broadcast_column_sums():
    """d sum(AB) / dA = ones @ B^T."""
    rng = make_rng(0, 'matmul')
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    with Tape():
        loss = T.sum(T.matmul(a, b))
        grads = T.backward(loss)
    expected = np.tile(b.data.sum(axis=1), (3, 1))
    assert np.allclose(grads[a], expected, rtol=1e-12)
    assert T.gradcheck(lambda: T.sum(T.matmul(a, b)), [a, b]) < 1e-6


@pytest.mark.parametrize('seed', range(10))
def test_elementwise_gradients_with_broadcasting(seed):
    rng = make_rng(seed, 'elementwise')
    shape = random_shape(rng)
    a = param(rng, *shape)
    b = param(rng, shape[1])
    weights = rng.standard_normal(shape)
    for op in (T.add, T.sub, T.mul):
        assert T.gradcheck(lambda: T.sum(T.mul(op(a, b), weights)), [a, b]) < RTOL


@pytest.mark.parametrize('seed', range(10))
def test_unary_gradients(seed):
    rng = make_rng(seed, 'unary')
    x = param(rng, *random_shape(rng), away_from_zero=True)
    positive = Tensor(np.abs(x.data) + 0.5, requires_grad=True)
    weights = rng.standard_normal(x.shape)
    for op, inp in ((T.relu, x), (T.tanh, x), (T.sigmoid, x), (T.exp, x), (T.neg, x), (T.log, positive)):
        assert T.gradcheck(lambda: T.sum(T.mul(op(inp), weights)), [inp]) < RTOL, op.__name__


@pytest.mark.parametrize('seed', range(10))
def test_linear_and_reduction_gradients(seed):
    rng = make_rng(seed, 'linear')
    n, d_in, d_out = (int(v) for v in rng.integers(1, 6, size=3))
    x, w, b = param(rng, n, d_in), param(rng, d_in, d_out), param(rng, d_out)
    assert T.gradcheck(lambda: T.mean(T.tanh(T.linear(x, w, b))), [x, w, b]) < RTOL
    assert T.gradcheck(lambda: T.sum(T.mul(T.sum(T.linear(x, w, b), axis=0), T.sum(w, axis=0))), [x, w, b]) < RTOL
    assert T.gradcheck(lambda: T.sum(T.mean(T.mul(x, x), axis=1, keepdims=True)), [x]) < RTOL


@pytest.mark.parametrize('seed', range(10))
def test_softmax_and_cross_entropy_gradients(seed):
    rng = make_rng(seed, 'softmax')
    batch, classes = (int(v) for v in rng.integers(1, 6, size=2))
    logits = param(rng, batch, classes)
    labels = rng.integers(0, classes, size=batch)
    weights = rng.standard_normal((batch, classes))
    assert T.gradcheck(lambda: T.cross_entropy(logits, labels), [logits]) < RTOL
    assert T.gradcheck(lambda: T.sum(T.mul(T.softmax(logits, axis=1), weights)), [logits]) < RTOL


@pytest.mark.parametrize('seed', range(10))
def test_conv2d_and_reshape_gradients(seed):
    rng = make_rng(seed, 'conv')
    stride = int(rng.integers(1, 3))
    channels, filters = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    x = param(rng, 2, channels, 5, 5)
    k = param(rng, filters, channels, 3, 3)
    out_shape = T.conv2d(x, k, stride).shape
    weights = rng.standard_normal((2, int(np.prod(out_shape[1:]))))
    assert T.gradcheck(lambda: T.sum(T.mul(T.flatten(T.conv2d(x, k, stride)), weights)), [x, k]) < RTOL


def test_conv2d_all_ones_full_overlap():
    out = T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv2d_identity_kernel():
    x = make_rng(1, 'conv').random((2, 1, 4, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv2d_output_size_with_stride():
    out = T.conv2d(Tensor(np.zeros((1, 1, 28, 28))), Tensor(np.zeros((4, 1, 3, 3))), stride=2)
    assert out.shape == (1, 4, 13, 13)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_random_case_gradcheck():
    """1x2x5x5 input, 3x2x3x3 kernel."""
    rng = make_rng(7, 'conv')
    x, k = param(rng, 1, 2, 5, 5), param(rng, 3, 2, 3, 3)
    assert T.gradcheck(lambda: T.sum(T.tanh(T.conv2d(x, k))), [x, k]) < 1e-5


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.array_equal(T.softmax(Tensor([123.0])).data, [1.0])
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0)
    assert big[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_sums_to_one_and_is_permutation_equivariant():
    v = make_rng(3, 'softmax').standard_normal(7) * 5
    perm = make_rng(4, 'perm').permutation(7)
    s = T.softmax(Tensor(v)).data
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.all(s > 0)
    assert np.allclose(T.softmax(Tensor(v[perm])).data, s[perm], rtol=0, atol=1e-14)


def test_softmax_rejects_empty_and_non_finite():
    with pytest.raises(DomainError):
        T.softmax(Tensor(np.zeros(0)))
    with pytest.raises(DomainError):
        T.softmax(Tensor([0.0, np.nan]))


def test_cross_entropy_uniform_logits_is_log_c():
    assert T.cross_entropy(Tensor(np.zeros((3, 5))), [0, 2, 4]).item() == pytest.approx(np.log(5))


def test_cross_entropy_margin_limit():
    logits = Tensor([[200.0, 0.0, 0.0]])
    assert T.cross_entropy(logits, [0]).item() < 1e-80


def test_cross_entropy_matches_direct_formula():
    rng = make_rng(11, 'ce')
    logits = rng.standard_normal((2, 3))
    labels = [2, 0]
    direct = np.mean([-np.log(np.exp(row[y]) / np.exp(row).sum()) for row, y in zip(logits, labels)])
    assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(direct, rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 3))), [-1])


def test_mse_gradient():
    rng = make_rng(5, 'mse')
    pred = param(rng, 4, 3)
    target = rng.standard_normal((4, 3))
    assert T.gradcheck(lambda: T.mse(pred, target), [pred]) < RTOL


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = T.mul(x, 2.0)
        with pytest.raises(ContractError):
            T.backward(y)


def test_backward_rejects_loss_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.sum(x))


def test_ops_outside_tape_are_not_recorded():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.sum(T.relu(x))
    assert y.tape is None
    assert not y.requires_grad


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            T.backward(T.sum(T.mul(x, 3.0)))
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_gradient_of_reused_input_sums_paths():
    x = Tensor([2.0], requires_grad=True)
    with Tape():
        grads = T.backward(T.sum(T.add(T.mul(x, x), x)))
    assert grads[x][0] == pytest.approx(5.0)


def test_non_finite_gradient_is_divergence():
    x = Tensor([1e-320], requires_grad=True)
    with Tape():
        loss = T.sum(T.log(x))
        with pytest.raises(DivergenceError):
            T.backward(loss)


def test_log_of_non_positive_is_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_value_and_grad_zero_for_unused_params():
    used = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    value, grads = T.value_and_grad(lambda: T.sum(T.mul(used, used)), {'used': used, 'unused': unused})
    assert value == pytest.approx(5.0)
    assert np.array_equal(grads['used'], [2.0, 4.0])
    assert np.array_equal(grads['unused'], [0.0])
    assert used.grad is None


def test_item_needs_single_element():
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_operators_match_functions():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])
    assert np.array_equal((a @ b).data, [[11.0]])
    assert np.array_equal((a + 1).data, [[2.0, 3.0]])
    assert np.array_equal((1 - a).data, [[0.0, -1.0]])
    assert np.array_equal((-a * 2).data, [[-2.0, -4.0]])
