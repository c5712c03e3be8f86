"""Network used by meta-training and the Class-IL benchmark.

Parameters live in three disjoint partitions:

    theta  feature extraction network (FEN): conv or fully-connected stack
    rho    attention scorer: linear -> tanh -> linear(1)
    w      classification network (CLN): linear layers with relu between

phi is all three, psi is (rho, w).
"""
from dataclasses import dataclass, replace

import numpy as np

import tensor as T
from codec import BlobReader, BlobWriter, read_container, write_container
from constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from errors import ContractError, DimensionError
from tensor import Tensor

PARTITIONS = ('theta', 'rho', 'w')


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple
    num_classes: int
    backbone: str = 'conv'
    conv_channels: int = 32
    conv_strides: tuple = (2, 2, 1, 1)
    kernel_size: int = 3
    mlp_hidden: tuple = (100, 100)
    cln_hidden: tuple = (128,)
    attention_hidden: int = None

    def __post_init__(self):
        object.__setattr__(self, 'input_shape', tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, 'conv_strides', tuple(int(v) for v in self.conv_strides))
        object.__setattr__(self, 'mlp_hidden', tuple(int(v) for v in self.mlp_hidden))
        object.__setattr__(self, 'cln_hidden', tuple(int(v) for v in self.cln_hidden))
        if self.backbone not in ('conv', 'mlp'):
            raise ContractError(f"unknown backbone {self.backbone!r}")
        if self.num_classes < 1:
            raise ContractError("num_classes must be >= 1")
        if self.backbone == 'conv':
            self.spatial_sizes()

    def spatial_sizes(self):
        """Feature-map side lengths after each conv layer (valid convolution)."""
        h, w = self.input_shape[1:]
        sizes = []
        for stride in self.conv_strides:
            if self.kernel_size > min(h, w):
                raise DimensionError(
                    f"input {self.input_shape} too small for {len(self.conv_strides)} conv layers "
                    f"with strides {self.conv_strides}")
            h = (h - self.kernel_size) // stride + 1
            w = (w - self.kernel_size) // stride + 1
            sizes.append((h, w))
        return sizes

    @property
    def feature_dim(self):
        if self.backbone == 'mlp':
            return self.mlp_hidden[-1] if self.mlp_hidden else int(np.prod(self.input_shape))
        h, w = self.spatial_sizes()[-1]
        return self.conv_channels * h * w

    def with_classes(self, num_classes):
        return replace(self, num_classes=num_classes)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _linear_params(rng, prefix, n_in, n_out):
    return {
        f"{prefix}.weight": _uniform(rng, n_in, (n_in, n_out)),
        f"{prefix}.bias": _uniform(rng, n_in, (n_out,)),
    }


def init_theta(arch, rng):
    theta = {}
    if arch.backbone == 'conv':
        channels = arch.input_shape[0]
        k = arch.kernel_size
        for i in range(len(arch.conv_strides)):
            fan_in = channels * k * k
            theta[f"conv{i}.weight"] = _uniform(rng, fan_in, (arch.conv_channels, channels, k, k))
            theta[f"conv{i}.bias"] = _uniform(rng, fan_in, (arch.conv_channels,))
            channels = arch.conv_channels
    else:
        width = int(np.prod(arch.input_shape))
        for i, hidden in enumerate(arch.mlp_hidden):
            theta.update(_linear_params(rng, f"fc{i}", width, hidden))
            width = hidden
    return theta


def init_rho(arch, rng):
    d = arch.feature_dim
    hidden = arch.attention_hidden or d
    return {**_linear_params(rng, 'attn0', d, hidden), **_linear_params(rng, 'attn1', hidden, 1)}


def init_w(arch, rng):
    """CLN with zero-mean uniform fan-in init; also used to re-create the head at meta-test."""
    w = {}
    width = arch.feature_dim
    for i, hidden in enumerate(arch.cln_hidden + (arch.num_classes,)):
        w.update(_linear_params(rng, f"cln{i}", width, hidden))
        width = hidden
    return w


@dataclass(frozen=True)
class Psi:
    rho: dict
    w: dict


@dataclass(frozen=True)
class ModelParams:
    arch: Architecture
    theta: dict
    rho: dict
    w: dict

    @property
    def psi(self):
        return Psi(self.rho, self.w)

    def with_psi(self, psi):
        return replace(self, rho=psi.rho, w=psi.w)

    def phi(self):
        """All parameters, keyed 'partition.name'."""
        return {f"{part}.{name}": p
                for part in PARTITIONS for name, p in getattr(self, part).items()}

    def with_phi(self, flat):
        parts = {part: {} for part in PARTITIONS}
        for key, p in flat.items():
            part, name = key.split('.', 1)
            parts[part][name] = p
        return replace(self, **parts)

    def snapshot(self):
        """Copies of every parameter array, for equality checks."""
        return {key: p.data.copy() for key, p in self.phi().items()}


def init_model(arch, rng):
    return ModelParams(arch, init_theta(arch, rng), init_rho(arch, rng), init_w(arch, rng))


def forward_fen(theta, x, arch):
    """R = f_theta(X): one feature row per sample."""
    x = T.as_tensor(x)
    if arch.backbone == 'conv':
        for i, stride in enumerate(arch.conv_strides):
            bias = T.reshape(theta[f"conv{i}.bias"], (1, -1, 1, 1))
            x = T.relu(T.conv2d(x, theta[f"conv{i}.weight"], stride) + bias)
        return T.flatten(x)
    x = T.flatten(x)
    for i in range(len(arch.mlp_hidden)):
        x = T.relu(T.linear(x, theta[f"fc{i}.weight"], theta[f"fc{i}.bias"]))
    return x


def attention_scores(rho, r):
    hidden = T.tanh(T.linear(r, rho['attn0.weight'], rho['attn0.bias']))
    return T.reshape(T.linear(hidden, rho['attn1.weight'], rho['attn1.bias']), (-1,))


@dataclass(frozen=True)
class MetaExample:
    """Attention coefficients a (length K) and the aggregate R_ME = a^T R (1 x d)."""
    a: Tensor
    r_me: Tensor


def attention_aggregate(rho, r, aggregation='attention'):
    """Pool the rows of R into one meta-example.

    aggregation='mean' replaces the learned scores with uniform weights.
    """
    r = T.as_tensor(r)
    if r.ndim != 2 or r.shape[0] < 1:
        raise DimensionError(f"attention_aggregate expects a K x d feature matrix, got {r.shape}")
    k = r.shape[0]
    if aggregation == 'mean':
        a = Tensor(np.full(k, 1.0 / k))
    elif aggregation == 'attention':
        a = T.softmax(attention_scores(rho, r))
    else:
        raise ContractError(f"unknown aggregation {aggregation!r}")
    return MetaExample(a, T.matmul(T.reshape(a, (1, k)), r))


def meta_example_logits(params, images, aggregation='attention'):
    """Logits (1 x classes) of the meta-example built from a single-label set."""
    r = forward_fen(params.theta, images, params.arch)
    return forward_cln(params.w, attention_aggregate(params.rho, r, aggregation).r_me)


def forward_cln(w, r):
    layers = len(w) // 2
    for i in range(layers):
        r = T.linear(r, w[f"cln{i}.weight"], w[f"cln{i}.bias"])
        if i < layers - 1:
            r = T.relu(r)
    return r


def forward(params, x):
    """Per-sample logits, no aggregation (query path and plain classification)."""
    return forward_cln(params.w, forward_fen(params.theta, x, params.arch))


def features(params, x, batch=512):
    """FEN features as a plain array, computed off-tape in chunks."""
    x = np.asarray(x)
    return np.concatenate([forward_fen(params.theta, x[i:i + batch], params.arch).data
                           for i in range(0, x.shape[0], batch)])


def predict(params, x, batch=512):
    x = np.asarray(x)
    logits = [forward(params, x[i:i + batch]).data for i in range(0, x.shape[0], batch)]
    return np.argmax(np.concatenate(logits), axis=1)


def save_checkpoint(params, path):
    blob = BlobWriter()
    arch = params.arch
    blob.text(arch.backbone)
    blob.array(np.array(arch.input_shape), 'u4')
    blob.u32(arch.num_classes)
    blob.u32(arch.conv_channels)
    blob.array(np.array(arch.conv_strides, dtype=np.uint32), 'u4')
    blob.u32(arch.kernel_size)
    blob.array(np.array(arch.mlp_hidden, dtype=np.uint32), 'u4')
    blob.array(np.array(arch.cln_hidden, dtype=np.uint32), 'u4')
    blob.u32(arch.attention_hidden or 0)
    for part in PARTITIONS:
        tensors = getattr(params, part)
        blob.u32(len(tensors))
        for name, p in tensors.items():
            blob.text(name)
            blob.array(p.data, 'f8')
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, blob.getvalue())


def load_checkpoint(path):
    blob = BlobReader(read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
    arch = Architecture(
        backbone=blob.text(),
        input_shape=tuple(blob.array('u4')),
        num_classes=blob.u32(),
        conv_channels=blob.u32(),
        conv_strides=tuple(blob.array('u4')),
        kernel_size=blob.u32(),
        mlp_hidden=tuple(blob.array('u4')),
        cln_hidden=tuple(blob.array('u4')),
        attention_hidden=blob.u32() or None,
    )
    parts = {}
    for part in PARTITIONS:
        parts[part] = {}
        for _ in range(blob.u32()):
            name = blob.text()
            parts[part][name] = Tensor(blob.array('f8'), requires_grad=True)
    blob.done()
    return ModelParams(arch, **parts)
