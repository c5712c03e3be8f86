import sys
import os
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import ContractError
from optim import AdamState, adam_step, sgd_step
from tensor import Tensor


@pytest.fixture
def params():
    return {'w': Tensor([1.0, -2.0], requires_grad=True), 'b': Tensor([0.5], requires_grad=True)}


def test_sgd_example():
    """p=1, g=0.5, lr=0.1 -> 0.95."""
    out = sgd_step({'p': Tensor([1.0])}, {'p': np.array([0.5])}, 0.1)
    assert out['p'].data[0] == pytest.approx(0.95)


def test_sgd_zero_gradient_leaves_params(params):
    out = sgd_step(params, {'w': np.zeros(2), 'b': np.zeros(1)}, 0.1)
    assert np.array_equal(out['w'].data, params['w'].data)
    assert np.array_equal(out['b'].data, params['b'].data)


def test_sgd_zero_lr_and_missing_grad(params):
    out = sgd_step(params, {'w': np.ones(2)}, 0.0)
    assert np.array_equal(out['w'].data, [1.0, -2.0])
    out = sgd_step(params, {'w': np.ones(2)}, 0.5)
    assert np.array_equal(out['b'].data, [0.5])


def test_sgd_does_not_modify_inputs(params):
    before = params['w'].data.copy()
    out = sgd_step(params, {'w': np.ones(2)}, 1.0)
    assert np.array_equal(params['w'].data, before)
    assert out['w'] is not params['w']
    assert out['w'].requires_grad


@pytest.mark.parametrize('lr', [-0.1, float('nan'), float('inf')])
def test_bad_learning_rate(params, lr):
    with pytest.raises(ContractError):
        sgd_step(params, {}, lr)
    with pytest.raises(ContractError):
        adam_step(params, {}, AdamState(), lr)


@pytest.mark.parametrize('scale', [1e-3, 1.0, 1e4])
def test_adam_first_step_magnitude_is_lr(scale):
    """Bias correction makes the first update ~lr whatever the gradient scale."""
    p = {'p': Tensor([3.0, -1.0])}
    g = {'p': np.array([scale, -scale])}
    out, state = adam_step(p, g, AdamState(), 0.01)
    assert np.allclose(np.abs(out['p'].data - p['p'].data), 0.01, rtol=1e-3)
    assert state.step == 1


def test_adam_state_is_threaded():
    p = {'p': Tensor([0.0])}
    state = AdamState()
    for _ in range(3):
        p, state = adam_step(p, {'p': np.array([1.0])}, state, 0.1)
    assert state.step == 3
    assert set(state.m) == {'p'}
    assert p['p'].data[0] == pytest.approx(-0.3, rel=1e-6)


def test_adam_missing_grad_counts_as_zero():
    p = {'a': Tensor([1.0]), 'b': Tensor([2.0])}
    out, state = adam_step(p, {'a': np.array([1.0])}, AdamState(), 0.1)
    assert out['b'].data[0] == 2.0
    assert np.array_equal(state.v['b'], [0.0])
