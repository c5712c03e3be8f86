"""Supervised class-incremental (Class-IL) benchmark.

Methods share one loop: tasks arrive in order, each is trained for `epochs`
passes over shuffled minibatches, and after every task the model is scored on
the test split of every task with a single head and no task identity.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

import tensor as T
from augment import AugConfig, select_cluster_variant, select_query_variant
from errors import DivergenceError
from meml import inner_update, outer_update, query_loss
from model import Architecture, features, init_model, predict
from optim import sgd_step
from rng import make_rng

logger = logging.getLogger(__name__)


@dataclass
class ReplayBuffer:
    capacity: int
    images: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    seen_count: int = 0

    def __len__(self):
        return len(self.labels)

    def sample(self, size, rng):
        """Up to `size` stored items without replacement, or None when empty."""
        if not self.labels:
            return None
        pick = rng.choice(len(self.labels), min(size, len(self.labels)), replace=False)
        return np.stack([self.images[i] for i in pick]), np.array([self.labels[i] for i in pick])


def reservoir_insert(buffer, image, label, rng):
    if buffer.capacity > 0:
        if buffer.seen_count < buffer.capacity:
            buffer.images.append(image)
            buffer.labels.append(int(label))
        else:
            j = int(rng.integers(0, buffer.seen_count + 1))
            if j < buffer.capacity:
                buffer.images[j] = image
                buffer.labels[j] = int(label)
    buffer.seen_count += 1
    return buffer


@dataclass(frozen=True)
class CLRunRecord:
    """acc_matrix[i, j]: accuracy (%) on task j after training task i."""
    method: str
    acc_matrix: np.ndarray
    random_init_acc: np.ndarray
    final_acc: float
    inner_steps: int = 0
    outer_steps: int = 0


@dataclass(frozen=True)
class Metrics:
    fwt: float
    bwt: float
    forgetting: float


def cl_architecture(input_shape, num_classes, hidden=(100, 100)):
    """Fully-connected FEN with relu hidden layers and a single linear head."""
    return Architecture(input_shape=input_shape, num_classes=num_classes, backbone='mlp',
                        mlp_hidden=tuple(hidden), cln_hidden=())


def evaluate_class_il(params, test_sets):
    """Accuracy (%) per task, argmax over every class the head has."""
    return np.array([100.0 * float(np.mean(predict(params, x) == y)) for x, y in test_sets])


def compute_metrics(record):
    """FWT, BWT and forgetting from an after-task accuracy matrix.

    FWT compares each task's accuracy just before it is trained (the
    checkpoint after the previous task) with an untrained model. BWT and
    forgetting run over every task but the last; forgetting takes the best
    earlier checkpoint as reference instead of the one right after training.
    """
    acc = np.asarray(record.acc_matrix, dtype=np.float64)
    tasks = acc.shape[0]
    if tasks < 2:
        return Metrics(0.0, 0.0, 0.0)
    final = acc[-1]
    fwt = np.mean([acc[t - 1, t] - record.random_init_acc[t] for t in range(1, tasks)])
    bwt = np.mean([final[t] - acc[t, t] for t in range(tasks - 1)])
    forgetting = np.mean([acc[t:tasks - 1, t].max() - final[t] for t in range(tasks - 1)])
    return Metrics(float(fwt), float(bwt), float(forgetting))


@dataclass
class _Counter:
    inner: int = 0
    outer: int = 0


def _run_stream(method, stream, test_stream, params, epochs, batch, seed, step_fn, progress):
    rng = make_rng(seed, 'class_il', method)
    tests = [test_stream.task_data(t) for t in range(len(test_stream))]
    random_init = evaluate_class_il(params, tests)
    counter = _Counter()
    rows = []

    for t in tqdm(range(len(stream)), desc=method, disable=not progress):
        images, labels = stream.task_data(t)
        step = 0
        for _ in range(epochs):
            order = rng.permutation(len(labels))
            for start in range(0, len(order), batch):
                idx = order[start:start + batch]
                try:
                    params = step_fn(params, images[idx], labels[idx], rng, counter)
                except DivergenceError as err:
                    raise err.at(method=method, task=t, step=step)
                step += 1
        rows.append(evaluate_class_il(params, tests))
        logger.info("%s: after task %d accuracies %s", method, t,
                    ' '.join(f"{a:.1f}" for a in rows[-1]))

    acc = np.array(rows)
    record = CLRunRecord(method, acc, random_init, float(acc[-1].mean()), counter.inner, counter.outer)
    return params, record


def _plain_loss(params, x, y):
    return query_loss(params, x, y)


def train_naive(stream, test_stream, params, epochs=1, lr=0.1, seed=0, batch=10, progress=False):
    """Fine-tune task after task with SGD; no forgetting mitigation."""
    def step_fn(params, x, y, rng, counter):
        phi = params.phi()
        loss, grads = T.value_and_grad(lambda: _plain_loss(params, x, y), phi)
        if not np.isfinite(loss):
            raise DivergenceError("naive loss is not finite")
        counter.outer += 1
        return params.with_phi(sgd_step(phi, grads, lr))

    return _run_stream('naive', stream, test_stream, params, epochs, batch, seed, step_fn, progress)[1]


def train_er(stream, test_stream, params, buffer_capacity=500, batch=10, epochs=1, lr=0.1, seed=0,
             progress=False):
    """Experience replay: loss on the batch plus loss on an equal-size buffer sample."""
    buffer = ReplayBuffer(buffer_capacity)

    def step_fn(params, x, y, rng, counter):
        replay = buffer.sample(batch, rng)

        def loss_fn():
            loss = _plain_loss(params, x, y)
            return loss if replay is None else T.add(loss, _plain_loss(params, *replay))

        phi = params.phi()
        loss, grads = T.value_and_grad(loss_fn, phi)
        if not np.isfinite(loss):
            raise DivergenceError("replay loss is not finite")
        counter.outer += 1
        for image, label in zip(x, y):
            reservoir_insert(buffer, image, label, rng)
        return params.with_phi(sgd_step(phi, grads, lr))

    return _run_stream('er', stream, test_stream, params, epochs, batch, seed, step_fn, progress)[1]


def train_meml_cl(stream, test_stream, params, buffer_capacity=500, epochs=1, alpha=0.1, beta=0.1, seed=0,
                  memlx=False, batch=10, aug_config=None, m=3, progress=False):
    """Meta-example updates on a class stream.

    Per batch: one inner step on psi per class present (its meta-example),
    then one SGD outer step on phi over the batch plus an equal-size buffer
    sample. With memlx both the class sets and the outer sets are replaced by
    their worst-case augmented variants first.
    """
    buffer = ReplayBuffer(buffer_capacity)
    aug_config = aug_config or AugConfig()
    method = 'memlx' if memlx else 'meml'

    def step_fn(params, x, y, rng, counter):
        replay = buffer.sample(batch, rng)
        outer_x = x
        if memlx:
            outer_x = select_query_variant(params, x, y, m, aug_config, rng)[0]

        psi = params.psi
        for label in np.unique(y):
            members = x[y == label]
            if memlx:
                members = select_cluster_variant(params, members, int(label), m, aug_config, rng)[0]
            psi, _ = inner_update(psi, features(params, members), int(label), alpha)
            counter.inner += 1
        params = params.with_psi(psi)

        outer_y = y
        if replay is not None:
            replay_x, replay_y = replay
            if memlx:
                replay_x = select_query_variant(params, replay_x, replay_y, m, aug_config, rng)[0]
            outer_x = np.concatenate([outer_x, replay_x])
            outer_y = np.concatenate([y, replay_y])
        params, _, _ = outer_update(params, outer_x, outer_y, beta)
        counter.outer += 1

        for image, label in zip(x, y):
            reservoir_insert(buffer, image, label, rng)
        return params

    return _run_stream(method, stream, test_stream, params, epochs, batch, seed, step_fn, progress)[1]


def run_method(method, stream, test_stream, arch, seed, buffer_capacity=500, batch=10, epochs=1, lr=0.1,
               alpha=0.1, beta=0.1, aug_config=None, progress=False):
    """Fresh model from `seed`, trained with one of naive | er | meml | memlx."""
    params = init_model(arch, make_rng(seed, 'init'))
    if method == 'naive':
        return train_naive(stream, test_stream, params, epochs, lr, seed, batch, progress)
    if method == 'er':
        return train_er(stream, test_stream, params, buffer_capacity, batch, epochs, lr, seed, progress)
    return train_meml_cl(stream, test_stream, params, buffer_capacity, epochs, alpha, beta, seed,
                         memlx=(method == 'memlx'), batch=batch, aug_config=aug_config, progress=progress)


def write_record(record, path):
    """CSV: one row per after-task checkpoint, one column per evaluated task."""
    tasks = record.acc_matrix.shape[1]
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['after_task'] + [f"task_{j}" for j in range(tasks)])
        writer.writerow(['random_init'] + [repr(float(a)) for a in record.random_init_acc])
        for i, row in enumerate(record.acc_matrix):
            writer.writerow([i] + [repr(float(a)) for a in row])


def summary(record):
    metrics = compute_metrics(record)
    return {
        'final_acc': record.final_acc,
        'fwt': metrics.fwt,
        'bwt': metrics.bwt,
        'forgetting': metrics.forgetting,
    }
