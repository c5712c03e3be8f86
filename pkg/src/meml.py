"""Meta-example meta-learning: inner/outer updates, meta-continual train and test.

The outer gradient is first order: the inner step is treated as a constant
with respect to phi, so one tape per update is enough.
"""
import csv
import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

import tensor as T
from augment import AugConfig, memlx_select
from cluster import sample_task
from constants import META_TEST_EPOCHS, UPDATE_MODES
from errors import ContractError, DivergenceError
from model import Psi, attention_aggregate, features, forward, forward_cln, init_model, init_w
from optim import AdamState, adam_step, sgd_step
from rng import make_rng
from tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaHyper:
    alpha: float = 0.1
    beta: float = 1e-4
    steps: int = 2000
    memlx_enabled: bool = False
    m: int = 3
    update_mode: str = 'meml'
    outer_optimizer: str = 'adam'
    reset_head_row: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractError(f"alpha and beta must be > 0, got {self.alpha}, {self.beta}")
        if self.update_mode not in UPDATE_MODES:
            raise ContractError(f"update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")
        if self.outer_optimizer not in ('adam', 'sgd'):
            raise ContractError(f"outer_optimizer must be 'adam' or 'sgd', got {self.outer_optimizer!r}")
        if self.m < 1:
            raise ContractError("m must be >= 1")


def _check_finite(loss, what):
    if not np.isfinite(loss):
        raise DivergenceError(f"{what} loss is not finite")


def inner_update(psi, r, label, alpha, aggregation='attention', weight=1.0, update_rho=True):
    """One gradient step on psi from the meta-example of R.

    R enters as a constant, so theta cannot receive gradient here. Returns
    (psi', loss). With update_rho=False only the head moves (meta-test).
    """
    r = Tensor(r.data if isinstance(r, Tensor) else r)
    labels = [int(label)]
    params = {**{f"rho.{k}": v for k, v in psi.rho.items()},
              **{f"w.{k}": v for k, v in psi.w.items()}}

    def loss_fn():
        r_me = attention_aggregate(psi.rho, r, aggregation).r_me
        loss = T.cross_entropy(forward_cln(psi.w, r_me), labels)
        return loss if weight == 1.0 else T.mul(loss, weight)

    loss, grads = T.value_and_grad(loss_fn, params)
    _check_finite(loss, 'inner')
    new_w = sgd_step(psi.w, {k: grads[f"w.{k}"] for k in psi.w}, alpha)
    new_rho = sgd_step(psi.rho, {k: grads[f"rho.{k}"] for k in psi.rho}, alpha) if update_rho else psi.rho
    return Psi(new_rho, new_w), loss


def query_loss(params, x, y, weight=1.0):
    loss = T.cross_entropy(forward(params, x), y)
    return loss if weight == 1.0 else T.mul(loss, weight)


def outer_update(params, x_query, y_query, beta, state=None, weight=1.0):
    """First-order step on all of phi from the per-sample query loss at (theta, psi').

    With an AdamState the step is Adam, otherwise plain SGD.
    Returns (params', state', loss).
    """
    phi = params.phi()
    loss, grads = T.value_and_grad(lambda: query_loss(params, x_query, y_query, weight), phi)
    _check_finite(loss, 'outer')
    if state is None:
        return params.with_phi(sgd_step(phi, grads, beta)), None, loss
    new_phi, state = adam_step(phi, grads, state, beta)
    return params.with_phi(new_phi), state, loss


def reset_head_row(psi, label, rng):
    """Fresh weights for the output unit of `label` in the last CLN layer."""
    last = len(psi.w) // 2 - 1
    key_w, key_b = f"cln{last}.weight", f"cln{last}.bias"
    weight = psi.w[key_w].data.copy()
    bias = psi.w[key_b].data.copy()
    bound = 1.0 / np.sqrt(weight.shape[0])
    weight[:, label] = rng.uniform(-bound, bound, weight.shape[0])
    bias[label] = rng.uniform(-bound, bound)
    w = dict(psi.w)
    w[key_w] = Tensor(weight, requires_grad=True)
    w[key_b] = Tensor(bias, requires_grad=True)
    return Psi(psi.rho, w)


@dataclass(frozen=True)
class MetaTrainResult:
    params: object
    losses: np.ndarray
    inner_steps: int
    outer_steps: int


def adapt(psi, r, label, alpha, update_mode, rng, weight=1.0):
    """Inner loop for one task under the given update mode; returns (psi', inner step count)."""
    if update_mode == 'meml':
        return inner_update(psi, r, label, alpha, 'attention', weight)[0], 1
    if update_mode == 'mean':
        return inner_update(psi, r, label, alpha, 'mean', weight)[0], 1
    if update_mode == 'single':
        j = int(rng.integers(r.shape[0]))
        return inner_update(psi, r[j:j + 1], label, alpha, 'attention', weight)[0], 1
    for j in range(r.shape[0]):
        psi = inner_update(psi, r[j:j + 1], label, alpha, 'attention', weight)[0]
    return psi, r.shape[0]


def meta_train(distribution, images, arch, hyper, seed, aug_config=None, progress=False, log_every=500):
    """Meta-continual training with meta-batch size 1.

    Per step: sample a task, optionally swap in the worst-case augmented sets,
    take the inner step(s) on psi from S_cluster and one outer step on phi from
    S_query. `losses` is the outer-loss trace.
    """
    arch = arch.with_classes(distribution.num_classes)
    rng = make_rng(seed, 'meta_train')
    params = init_model(arch, make_rng(seed, 'init'))
    state = AdamState() if hyper.outer_optimizer == 'adam' else None
    aug_config = aug_config or AugConfig()
    aggregation = 'mean' if hyper.update_mode == 'mean' else 'attention'

    losses = np.zeros(hyper.steps)
    inner_steps = 0
    for step in tqdm(range(hyper.steps), desc='meta-train', disable=not progress):
        episode = sample_task(distribution, images, rng, aug_config.max_shift)
        if hyper.memlx_enabled:
            episode = memlx_select(params, episode, hyper.m, aug_config, rng, aggregation).episode

        try:
            psi = params.psi
            if hyper.reset_head_row:
                psi = reset_head_row(psi, episode.cluster_label, rng)
            r = features(params, episode.cluster_x)
            psi, count = adapt(psi, r, episode.cluster_label, hyper.alpha, hyper.update_mode, rng, episode.weight)
            params = params.with_psi(psi)
            params, state, losses[step] = outer_update(
                params, episode.query_x, episode.query_y, hyper.beta, state, episode.weight)
        except DivergenceError as err:
            raise err.at(step=step)
        inner_steps += count

        if log_every and (step + 1) % log_every == 0:
            window = losses[max(0, step + 1 - log_every):step + 1]
            logger.info("meta-train step %d/%d: outer loss %.4f", step + 1, hyper.steps, window.mean())

    return MetaTrainResult(params, losses, inner_steps, hyper.steps)


@dataclass(frozen=True)
class MetaTestCurve:
    task_counts: tuple
    accuracies: tuple

    def as_dict(self):
        return {int(n): float(a) for n, a in zip(self.task_counts, self.accuracies)}


def meta_test_head(arch, rng):
    w = init_w(arch, rng)
    out = f"cln{len(arch.cln_hidden)}"
    for key in (f"{out}.weight", f"{out}.bias"):
        w[key] = Tensor(np.zeros_like(w[key].data), requires_grad=True)
    return w


def meta_test(params, test_dataset, shots_per_class, seed, task_counts=None, epochs=META_TEST_EPOCHS, lr=None,
              train_dataset=None, aggregation='attention'):
    """Meta-continual test: frozen theta and rho, fresh head, classes one at a time.

    For each n in task_counts the first n classes (in a seeded order) are
    learned sequentially from `shots_per_class` samples each, one meta-example
    step per class per epoch, then accuracy (%) is measured on the held-out
    samples of all n classes. The new head keeps random hidden layers and a
    zero output layer, so every class starts from equal logits.
    """
    if train_dataset is not None:
        overlap = set(train_dataset.source_classes) & set(test_dataset.source_classes)
        if overlap:
            raise ContractError(f"test classes overlap training classes: {sorted(overlap)[:5]}")
    if shots_per_class < 1:
        raise ContractError("shots_per_class must be >= 1")

    n_classes = test_dataset.class_count
    task_counts = tuple(task_counts) if task_counts else (n_classes,)
    if min(task_counts) < 1 or max(task_counts) > n_classes:
        raise ContractError(f"task counts {task_counts} must lie in [1, {n_classes}]")
    lr = lr if lr is not None else 0.1

    rng = make_rng(seed, 'meta_test')
    order = rng.permutation(n_classes)
    shots, held, held_labels = [], [], []
    for position, c in enumerate(order):
        idx = rng.permutation(test_dataset.class_indices(c))
        if len(idx) <= shots_per_class:
            raise ContractError(f"class {c} has {len(idx)} samples; need more than {shots_per_class}")
        shots.append(features(params, test_dataset.images[idx[:shots_per_class]]))
        held.append(features(params, test_dataset.images[idx[shots_per_class:]]))
        held_labels.append(np.full(len(idx) - shots_per_class, position))

    accuracies = []
    for n in task_counts:
        w = meta_test_head(params.arch.with_classes(n), make_rng(seed, 'meta_test_head', n))
        psi = Psi(params.rho, w)
        for _ in range(epochs):
            for position in range(n):
                psi, _ = inner_update(psi, shots[position], position, lr, aggregation, update_rho=False)
        r = np.concatenate(held[:n])
        labels = np.concatenate(held_labels[:n])
        predicted = np.argmax(forward_cln(psi.w, Tensor(r)).data, axis=1)
        accuracies.append(100.0 * float(np.mean(predicted == labels)))
        logger.info("meta-test: %d classes, accuracy %.2f%%", n, accuracies[-1])

    return MetaTestCurve(task_counts, tuple(accuracies))


def write_loss_trace(losses, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'outer_loss'])
        for step, loss in enumerate(losses):
            writer.writerow([step, repr(float(loss))])
