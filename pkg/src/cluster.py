"""Unsupervised task construction: embeddings, k-means pseudo-labels, task sampling."""
import logging
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from tqdm import tqdm

import tensor as T
from augment import AugConfig, horizontal_flip, random_crop_pad, vertical_flip
from codec import BlobReader, BlobWriter, read_container, write_container
from constants import (BALANCED_MODES, DISTRIBUTION_MAGIC, DISTRIBUTION_VERSION,
                       MAX_LOSS_WEIGHT, MIN_LOSS_WEIGHT)
from errors import ContractError, DivergenceError, EmptyDistributionError
from optim import AdamState, adam_step
from rng import make_rng
from tensor import Tensor

logger = logging.getLogger(__name__)

# Per-element transform codes for padded duplicates in augment mode.
IDENTITY, HFLIP, VFLIP, BOTH_FLIPS, CROP_SHIFT = range(5)


@dataclass(frozen=True)
class Encoder:
    params: dict
    input_shape: tuple
    history: tuple = ()


def _init_autoencoder(input_dim, hidden, latent_dim, rng):
    layers = {'enc0': (input_dim, hidden), 'enc1': (hidden, latent_dim),
              'dec0': (latent_dim, hidden), 'dec1': (hidden, input_dim)}
    params = {}
    for name, (n_in, n_out) in layers.items():
        bound = 1.0 / np.sqrt(n_in)
        params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        params[f"{name}.bias"] = Tensor(rng.uniform(-bound, bound, (n_out,)), requires_grad=True)
    return params


def encode(params, x):
    h = T.relu(T.linear(T.flatten(T.as_tensor(x)), params['enc0.weight'], params['enc0.bias']))
    return T.linear(h, params['enc1.weight'], params['enc1.bias'])


def decode(params, z):
    h = T.relu(T.linear(z, params['dec0.weight'], params['dec0.bias']))
    return T.sigmoid(T.linear(h, params['dec1.weight'], params['dec1.bias']))


def reconstruction_loss(params, x):
    x = np.asarray(x)
    return T.mse(decode(params, encode(params, x)), x.reshape(x.shape[0], -1))


def _dataset_loss(params, flat, batch=256):
    total = 0.0
    for start in range(0, flat.shape[0], batch):
        chunk = flat[start:start + batch]
        total += reconstruction_loss(params, chunk).item() * chunk.shape[0]
    return total / flat.shape[0]


def train_autoencoder(dataset, latent_dim, epochs, lr, seed, hidden=128, batch_size=32, progress=False):
    """Fully-connected autoencoder trained with Adam on mean-squared reconstruction.

    Returns only the encoder half; `history` holds the full-dataset loss before
    training and after every epoch.
    """
    if latent_dim < 2:
        raise ContractError(f"latent_dim must be >= 2, got {latent_dim}")
    rng = make_rng(seed, 'autoencoder')
    flat = dataset.images.reshape(len(dataset), -1)
    params = _init_autoencoder(flat.shape[1], hidden, latent_dim, rng)
    state = AdamState()
    history = [_dataset_loss(params, flat)]

    for epoch in tqdm(range(epochs), desc='autoencoder', disable=not progress):
        order = rng.permutation(flat.shape[0])
        for start in range(0, flat.shape[0], batch_size):
            batch = flat[order[start:start + batch_size]]
            try:
                loss, grads = T.value_and_grad(lambda: reconstruction_loss(params, batch), params)
            except DivergenceError as err:
                raise err.at(epoch=epoch)
            if not np.isfinite(loss):
                raise DivergenceError("autoencoder loss is not finite", epoch=epoch)
            params, state = adam_step(params, grads, state, lr)
        history.append(_dataset_loss(params, flat))
        logger.debug("autoencoder epoch %d: mse %.6f", epoch, history[-1])

    logger.info("autoencoder: mse %.5f -> %.5f over %d epochs", history[0], history[-1], epochs)
    encoder = {k: v for k, v in params.items() if k.startswith('enc')}
    return Encoder(encoder, dataset.image_shape, tuple(history))


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] < 2:
            raise ContractError(f"embeddings must be N x d with d >= 2, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("embeddings contain non-finite values")

    def __len__(self):
        return self.vectors.shape[0]


def embed(encoder, dataset, batch=256):
    chunks = [encode(encoder.params, dataset.images[i:i + batch]).data
              for i in range(0, len(dataset), batch)]
    return EmbeddingSet(np.concatenate(chunks), np.arange(len(dataset)))


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: tuple

    @property
    def inertia(self):
        return self.inertia_history[-1]


def _sq_distances(x, centroids):
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum('nkd,nkd->nk', diff, diff)


def _kmeans_plusplus(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(x, x[[idx]])[:, 0])
    return x[chosen].copy()


def kmeans(z, k, max_iters, seed):
    """Lloyd's algorithm from a k-means++ start.

    Stops when assignments stop changing or after max_iters assignments.
    Nearest-centroid ties go to the lowest centroid index; an empty cluster is
    re-seeded at the point farthest from its own centroid.
    """
    x = np.asarray(z.vectors if isinstance(z, EmbeddingSet) else z, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    if max_iters < 1:
        raise ContractError("max_iters must be >= 1")

    rng = make_rng(seed, 'kmeans')
    centroids = _kmeans_plusplus(x, k, rng)
    labels = None
    history = []
    for _ in range(max_iters):
        dist = _sq_distances(x, centroids)
        assigned = np.argmin(dist, axis=1)
        own = dist[np.arange(n), assigned]
        history.append(float(own.sum()))
        if labels is not None and np.array_equal(assigned, labels):
            break
        labels = assigned

        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        own = own.copy()
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(own))
            centroids[j] = x[far]
            own[far] = 0.0

    return KMeansResult(labels, centroids, tuple(history))


@dataclass(frozen=True)
class TaskDistribution:
    """Clusters used as tasks.

    clusters[i] holds sample indices, transforms[i] one transform code per
    element (non-zero only for augment-mode padding), weights[i] the loss
    weight of tasks drawn from cluster i.
    """
    clusters: tuple
    cluster_labels: tuple
    transforms: tuple
    weights: tuple
    pseudo_labels: np.ndarray
    num_classes: int
    query_random_count: int
    balanced_mode: str = 'off'
    target_size: int = 0

    def __len__(self):
        return len(self.clusters)

    def sizes(self):
        return np.array([len(c) for c in self.clusters], dtype=np.int64)

    @cached_property
    def _flat(self):
        members = np.concatenate(self.clusters)
        codes = np.concatenate(self.transforms)
        owner = np.concatenate([np.full(len(c), i) for i, c in enumerate(self.clusters)])
        return members, codes, owner

    def save(self, path):
        blob = BlobWriter()
        blob.text(self.balanced_mode)
        blob.u32(self.num_classes)
        blob.u32(self.query_random_count)
        blob.u32(self.target_size)
        blob.array(self.pseudo_labels, 'i8')
        blob.u32(len(self.clusters))
        for members, label, codes, weight in zip(self.clusters, self.cluster_labels, self.transforms, self.weights):
            blob.u32(label)
            blob.f64(weight)
            blob.array(members, 'i8')
            blob.array(codes, 'u1')
        write_container(path, DISTRIBUTION_MAGIC, DISTRIBUTION_VERSION, blob.getvalue())

    @staticmethod
    def load(path):
        blob = BlobReader(read_container(path, DISTRIBUTION_MAGIC, DISTRIBUTION_VERSION))
        mode = blob.text()
        num_classes = blob.u32()
        query_random_count = blob.u32()
        target_size = blob.u32()
        pseudo_labels = blob.array('i8')
        clusters, labels, transforms, weights = [], [], [], []
        for _ in range(blob.u32()):
            labels.append(blob.u32())
            weights.append(blob.f64())
            clusters.append(blob.array('i8'))
            transforms.append(blob.array('u1'))
        blob.done()
        return TaskDistribution(tuple(clusters), tuple(labels), tuple(transforms), tuple(weights),
                                pseudo_labels, num_classes, query_random_count, mode, target_size)


def build_task_distribution(pseudo_labels, min_cluster_size=3, query_random_count=10,
                            balanced_mode='off', balance_size=None, seed=0):
    """Turn pseudo-labels into a task distribution.

    Clusters smaller than min_cluster_size are dropped. N (target size) is
    `balance_size` or the floor of the mean surviving cluster size.
      off       natural sizes
      threshold drop clusters below N, subsample the rest to N
      augment   subsample large clusters to N, pad small ones with flip/shift duplicates
      weighted  natural sizes, loss weight N/|cluster| clipped to [0.25, 4]
    """
    if min_cluster_size < 3:
        raise ContractError(f"min_cluster_size must be >= 3, got {min_cluster_size}")
    if balanced_mode not in BALANCED_MODES:
        raise ContractError(f"balanced_mode must be one of {BALANCED_MODES}, got {balanced_mode!r}")
    if query_random_count < 0:
        raise ContractError("query_random_count must be >= 0")

    labels = np.asarray(pseudo_labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    groups = [(c, np.flatnonzero(labels == c)) for c in range(num_classes)]
    eligible = [(c, g) for c, g in groups if len(g) >= min_cluster_size]
    if not eligible:
        raise EmptyDistributionError(f"no cluster has at least {min_cluster_size} elements")

    target = balance_size if balance_size is not None else int(np.mean([len(g) for _, g in eligible]))
    if target < min_cluster_size:
        raise ContractError(f"balance size {target} is below min_cluster_size {min_cluster_size}")

    rng = make_rng(seed, 'balance')
    clusters, cluster_labels, transforms, weights = [], [], [], []
    for c, members in eligible:
        codes = np.zeros(len(members), dtype=np.uint8)
        if balanced_mode in ('threshold', 'augment') and len(members) >= target:
            members = np.sort(rng.choice(members, target, replace=False))
            codes = codes[:target]
        elif balanced_mode == 'threshold':
            continue
        elif balanced_mode == 'augment':
            extra = target - len(members)
            members = np.concatenate([members, members[np.arange(extra) % len(members)]])
            codes = np.concatenate([codes, (np.arange(extra) % 4 + 1).astype(np.uint8)])
        weight = 1.0
        if balanced_mode == 'weighted':
            weight = float(np.clip(target / len(members), MIN_LOSS_WEIGHT, MAX_LOSS_WEIGHT))
        clusters.append(members)
        cluster_labels.append(c)
        transforms.append(codes)
        weights.append(weight)

    if not clusters:
        raise EmptyDistributionError(f"no cluster reaches the balance size {target}")
    logger.info("task distribution (%s): %d tasks, sizes %d..%d", balanced_mode, len(clusters),
                min(len(m) for m in clusters), max(len(m) for m in clusters))
    return TaskDistribution(tuple(clusters), tuple(cluster_labels), tuple(transforms), tuple(weights),
                            labels, num_classes, query_random_count, balanced_mode, int(target))


def supervised_distribution(labels, min_cluster_size=3, query_random_count=10):
    """Tasks from ground-truth classes instead of clusters (fully supervised variant)."""
    return build_task_distribution(labels, min_cluster_size, query_random_count)


@dataclass(frozen=True)
class TaskEpisode:
    cluster_x: np.ndarray
    cluster_label: int
    query_x: np.ndarray
    query_y: np.ndarray
    cluster_ids: np.ndarray
    query_ids: np.ndarray
    weight: float = 1.0

    @property
    def cluster_y(self):
        return np.full(self.cluster_x.shape[0], self.cluster_label, dtype=np.int64)

    def replace_images(self, cluster_x, query_x):
        return replace(self, cluster_x=cluster_x, query_x=query_x)


def _materialize(images, indices, codes, rng, max_shift):
    out = images[indices].copy()
    for i in np.flatnonzero(codes):
        code = codes[i]
        if code == HFLIP:
            out[i] = horizontal_flip(out[i])
        elif code == VFLIP:
            out[i] = vertical_flip(out[i])
        elif code == BOTH_FLIPS:
            out[i] = horizontal_flip(vertical_flip(out[i]))
        elif code == CROP_SHIFT:
            out[i] = random_crop_pad(out[i], max_shift, rng)
    return out


def sample_task(distribution, images, rng, max_shift=AugConfig.max_shift):
    """One episode: ceil(2n/3) cluster members go to S_cluster, the rest plus
    `query_random_count` samples from other clusters go to S_query.

    Padded copies follow their original, so the split is made over distinct
    sample ids and no image lands on both sides. `max_shift` bounds the
    crop-shift applied to CROP_SHIFT copies.
    """
    if not len(distribution):
        raise EmptyDistributionError("cannot sample from an empty task distribution")
    index = int(rng.integers(len(distribution)))
    members = distribution.clusters[index]
    codes = distribution.transforms[index]
    label = distribution.cluster_labels[index]

    order = rng.permutation(len(members))
    distinct, slot = np.unique(members, return_inverse=True)
    if len(distinct) == len(members):
        n_inner = -(-2 * len(members) // 3)
        inner, own = order[:n_inner], order[n_inner:]
    else:
        kept = rng.permutation(len(distinct))[:-(-2 * len(distinct) // 3)]
        side = np.isin(slot, kept)[order]
        inner, own = order[side], order[~side]

    query_ids = [members[own]]
    query_codes = [codes[own]]
    query_y = [np.full(len(own), label, dtype=np.int64)]
    count = distribution.query_random_count
    if count:
        all_members, all_codes, owner = distribution._flat
        pool = np.flatnonzero(owner != index)
        if not len(pool):
            raise ContractError("query_random_count > 0 needs at least two clusters")
        picked = pool[rng.choice(len(pool), count, replace=len(pool) < count)]
        query_ids.append(all_members[picked])
        query_codes.append(all_codes[picked])
        query_y.append(np.array([distribution.cluster_labels[o] for o in owner[picked]], dtype=np.int64))

    query_ids = np.concatenate(query_ids)
    return TaskEpisode(
        cluster_x=_materialize(images, members[inner], codes[inner], rng, max_shift),
        cluster_label=int(label),
        query_x=_materialize(images, query_ids, np.concatenate(query_codes), rng, max_shift),
        query_y=np.concatenate(query_y),
        cluster_ids=members[inner],
        query_ids=query_ids,
        weight=distribution.weights[index],
    )
