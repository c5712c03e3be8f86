"""Functional optimizers over {name: Tensor} parameter dicts.

Steps never modify their inputs; they return new parameter tensors (and a
new AdamState), so a caller holding the old dict still sees the old values.
"""
from dataclasses import dataclass, field

import numpy as np

from errors import ContractError
from tensor import Tensor


def _check_lr(lr):
    if lr < 0 or not np.isfinite(lr):
        raise ContractError(f"learning rate must be a finite value >= 0, got {lr}")


def sgd_step(params, grads, lr):
    _check_lr(lr)
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        data = p.data if g is None or lr == 0 else p.data - lr * g
        out[name] = Tensor(data, requires_grad=p.requires_grad)
    return out


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    _check_lr(lr)
    step = state.step + 1
    m, v, out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m_prev = state.m.get(name, np.zeros_like(p.data))
        v_prev = state.v.get(name, np.zeros_like(p.data))
        m[name] = beta1 * m_prev + (1 - beta1) * g
        v[name] = beta2 * v_prev + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1 ** step)
        v_hat = v[name] / (1 - beta2 ** step)
        out[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=p.requires_grad)
    return out, AdamState(step, m, v)
