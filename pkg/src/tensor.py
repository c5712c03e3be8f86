"""Reverse-mode automatic differentiation over float64 numpy arrays.

Ops run eagerly. While a `Tape` is active, every op with at least one input
that requires grad is appended to it; `backward(loss)` replays the tape in
reverse. Outside a tape nothing is recorded, which is how evaluation passes
avoid building graphs.

Single-threaded: the active tape is module state.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractError, DimensionError, DivergenceError, DomainError, LabelError

_TAPES = []


class Tape:
    """Ordered record of (output, inputs, backward_fn) triples."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, out, inputs, backward_fn):
        self.ops.append((out, inputs, backward_fn))


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn):
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias=None):
    """x @ weight + bias, with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x):
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x):
    """Keep the leading (batch) axis, merge the rest."""
    return reshape(x, (x.shape[0], -1))


def sum(x, axis=None, keepdims=False):
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _softmax(data, axis):
    shifted = data - np.max(data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(v, axis=-1):
    v = as_tensor(v)
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(v.data)):
        raise DomainError("softmax input has non-finite entries")
    s = _softmax(v.data, axis)

    def backward_fn(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _result(s, (v,), backward_fn)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x C logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"cross_entropy: {batch} logits rows but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise LabelError(f"labels must lie in [0, {classes}), got {labels.min()}..{labels.max()}")

    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(batch)
    loss = np.mean(log_norm - shifted[rows, labels])

    def backward_fn(g):
        probs = _softmax(logits.data, 1)
        probs[rows, labels] -= 1.0
        return (g * probs / batch,)

    return _result(np.asarray(loss), (logits,), backward_fn)


def mse(pred, target):
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def conv2d(x, kernel, stride=1):
    """Valid cross-correlation of N x C x H x W input with F x C x kh x kw kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ContractError(f"conv2d stride must be a positive int, got {stride!r}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels, kernel {kernel.shape} expects {kc}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")

    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward_fn(g):
        dkernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        dx = np.zeros_like(x.data)
        h_stop = stride * (ho - 1) + 1
        w_stop = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                dx[:, :, i:i + h_stop:stride, j:j + w_stop:stride] += contrib.transpose(0, 3, 1, 2)
        return dx, dkernel

    return _result(np.ascontiguousarray(out), (x, kernel), backward_fn)


def backward(loss, accumulate=True):
    """Replay the loss's tape in reverse.

    Returns {leaf tensor: gradient of this loss}. With accumulate=True the
    gradients are also added into each leaf's `.grad`.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape")

    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, inputs, backward_fn in reversed(tape.ops):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape is tape:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
            else:
                prev = leaves.get(id(inp))
                leaves[id(inp)] = (inp, gi if prev is None else prev[1] + gi)

    grads = {}
    for leaf, g in leaves.values():
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        grads[leaf] = g
    return grads


def value_and_grad(fn, params):
    """Evaluate fn() on a fresh tape; gradients keyed like `params` (zeros when unused)."""
    with Tape():
        loss = fn()
        grads = backward(loss, accumulate=False)
    value = loss.item()
    return value, {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}


def numeric_grad(fn, tensor, h=1e-5):
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().item()
        flat[i] = orig - h
        minus = fn().item()
        flat[i] = orig
        grad.flat[i] = (plus - minus) / (2 * h)
    return grad


def gradcheck(fn, inputs, h=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    with Tape():
        loss = fn()
        grads = backward(loss, accumulate=False)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t, np.zeros_like(t.data))
        numeric = numeric_grad(fn, t, h)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-3)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
