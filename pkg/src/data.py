"""Datasets: IDX files, the synthetic few-shot generator, class splits and streams."""
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from constants import DATA_DIR_ENV, IDX_MAGIC_IMAGES, IDX_MAGIC_IMAGES_4D, IDX_MAGIC_LABELS
from errors import ConsistencyError, ContractError, FormatError, LengthError
from rng import make_rng

logger = logging.getLogger(__name__)

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


@dataclass(frozen=True)
class Dataset:
    """Images N x C x H x W in [0, 1] with integer labels in [0, class_count).

    `source_classes[i]` is the original class id behind contiguous label i,
    so class identity survives relabelling splits.
    """
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = 'dataset'
    source_classes: tuple = ()

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise ContractError(f"images must be N x C x H x W, got shape {images.shape}")
        if images.shape[0] < 1:
            raise ContractError("dataset needs at least one sample")
        if labels.shape[0] != images.shape[0]:
            raise ContractError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ContractError(f"labels must lie in [0, {self.class_count})")
        if images.min() < 0.0 or images.max() > 1.0:
            raise ContractError("pixel values must lie in [0, 1]")
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'labels', labels)
        if not self.source_classes:
            object.__setattr__(self, 'source_classes', tuple(range(self.class_count)))

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def class_indices(self, label):
        return np.flatnonzero(self.labels == label)

    def class_sizes(self):
        return np.bincount(self.labels, minlength=self.class_count)


def _read_idx(path, magics):
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < 4:
        raise LengthError(f"{path}: too short for an IDX header")

    magic = struct.unpack('!I', raw[:4])[0]
    if magic not in magics:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")

    ndim = magic & 0xff
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise LengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(f'!{ndim}I', raw[4:header_size])

    count = int(np.prod(dims, dtype=np.int64))
    body = raw[header_size:]
    if len(body) != count:
        raise LengthError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path):
    pixels = _read_idx(images_path, (IDX_MAGIC_IMAGES, IDX_MAGIC_IMAGES_4D))
    labels = _read_idx(labels_path, (IDX_MAGIC_LABELS,))
    if pixels.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")

    name = os.path.basename(images_path).split('-')[0]
    images = pixels.astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), int(labels.max()) + 1, name)


def write_idx(dataset, images_path, labels_path):
    if dataset.class_count > 256:
        raise ContractError("IDX labels are single bytes; class_count must be <= 256")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    n, c, h, w = pixels.shape
    if c == 1:
        header = struct.pack('!IIII', IDX_MAGIC_IMAGES, n, h, w)
    else:
        header = struct.pack('!IIIII', IDX_MAGIC_IMAGES_4D, n, c, h, w)
    with open(images_path, 'wb') as f:
        f.write(header + pixels.tobytes())
    with open(labels_path, 'wb') as f:
        f.write(struct.pack('!II', IDX_MAGIC_LABELS, n) + dataset.labels.astype(np.uint8).tobytes())


def data_path(path, root=None):
    """Resolve a relative dataset path against $FUSION_DATA_DIR."""
    root = root if root is not None else os.environ.get(DATA_DIR_ENV, '.')
    return path if os.path.isabs(path) else os.path.join(root, path)


def load_mnist(split='train', root=None):
    images, labels = MNIST_FILES[split]
    return load_idx(data_path(images, root), data_path(labels, root))


def make_synthetic_fewshot(num_classes, samples_per_class_range, image_size, blob_noise_sigma, seed, channels=1):
    """Noisy copies of one random block template per class; class sizes drawn uniformly."""
    low, high = samples_per_class_range
    if low < 2 or high < low:
        raise ContractError(f"samples_per_class_range must satisfy 2 <= min <= max, got {samples_per_class_range}")
    if num_classes < 1 or image_size < 1:
        raise ContractError("num_classes and image_size must be positive")
    if blob_noise_sigma < 0:
        raise ContractError("blob_noise_sigma must be >= 0")

    rng = make_rng(seed, 'synthetic')
    block = max(1, image_size // 7)
    grid = -(-image_size // block)
    counts = rng.integers(low, high + 1, size=num_classes)
    # templates are drawn before any noise, so they do not depend on sigma
    coarse = (rng.random((num_classes, channels, grid, grid)) < 0.5).astype(np.float64)
    templates = np.kron(coarse, np.ones((1, 1, block, block)))[..., :image_size, :image_size]

    images, labels = [], []
    for label, count in enumerate(counts):
        samples = np.repeat(templates[label][None], count, axis=0)
        if blob_noise_sigma > 0:
            samples = np.clip(samples + blob_noise_sigma * rng.standard_normal(samples.shape), 0.0, 1.0)
        images.append(samples)
        labels.append(np.full(count, label))

    logger.info("synthetic dataset: %d classes, %d samples", num_classes, int(counts.sum()))
    return Dataset(np.concatenate(images), np.concatenate(labels), num_classes, 'synthetic')


def _class_subset(dataset, classes, name):
    mask = np.isin(dataset.labels, classes)
    remap = np.zeros(dataset.class_count, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    sources = tuple(dataset.source_classes[c] for c in classes)
    return Dataset(dataset.images[mask], remap[dataset.labels[mask]], len(classes), name, sources)


def split_classes(dataset, train_classes, val_classes, test_classes, seed):
    """Disjoint class partitions, each relabelled to 0..k-1. A zero-class split is None."""
    counts = (train_classes, val_classes, test_classes)
    if min(counts) < 0 or sum(counts) > dataset.class_count:
        raise ContractError(f"requested {counts} classes overlap: only {dataset.class_count} available")

    order = make_rng(seed, 'split').permutation(dataset.class_count)
    bounds = np.cumsum((0,) + counts)
    splits = []
    for part, name in zip(range(3), ('train', 'val', 'test')):
        classes = np.sort(order[bounds[part]:bounds[part + 1]])
        splits.append(_class_subset(dataset, classes, f"{dataset.name}-{name}") if len(classes) else None)
    return tuple(splits)


@dataclass(frozen=True)
class ClassStream:
    """Tasks of consecutive class ids; task t holds the sample indices of its classes."""
    dataset: Dataset
    tasks: tuple
    classes_per_task: int

    def __len__(self):
        return len(self.tasks)

    def task_classes(self, t):
        return tuple(range(t * self.classes_per_task, (t + 1) * self.classes_per_task))

    def task_data(self, t):
        idx = self.tasks[t]
        return self.dataset.images[idx], self.dataset.labels[idx]


def make_class_stream(dataset, classes_per_task):
    if classes_per_task < 1 or dataset.class_count % classes_per_task:
        raise ContractError(
            f"{dataset.class_count} classes cannot be split into tasks of {classes_per_task}")
    tasks = []
    for first in range(0, dataset.class_count, classes_per_task):
        members = np.arange(first, first + classes_per_task)
        tasks.append(np.flatnonzero(np.isin(dataset.labels, members)))
    return ClassStream(dataset, tuple(tasks), classes_per_task)


def split_samples(dataset, test_fraction, seed):
    """Per-class train/test split of samples; every class keeps at least one sample on each side."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = make_rng(seed, 'holdout')
    train, test = [], []
    for c in range(dataset.class_count):
        idx = rng.permutation(dataset.class_indices(c))
        if len(idx) < 2:
            raise ContractError(f"class {c} has {len(idx)} samples; need 2 to hold one out")
        n_test = min(len(idx) - 1, max(1, int(round(test_fraction * len(idx)))))
        test.append(idx[:n_test])
        train.append(idx[n_test:])

    def subset(parts, suffix):
        idx = np.sort(np.concatenate(parts))
        return Dataset(dataset.images[idx], dataset.labels[idx], dataset.class_count,
                       f"{dataset.name}-{suffix}", dataset.source_classes)

    return subset(train, 'train'), subset(test, 'test')
