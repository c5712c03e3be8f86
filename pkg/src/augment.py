"""Image transforms and MEMLX worst-case augmentation selection.

Transforms take a single C x H x W image or an N x C x H x W batch and never
leave [0, 1]. Strategies act on a whole set at once, so one random draw is
shared by every image in the set.
"""
from dataclasses import dataclass

import numpy as np

import tensor as T
from errors import ContractError
from model import forward, meta_example_logits
from rng import make_rng

STRATEGIES = {
    1: 'vertical flip + horizontal flip',
    2: 'brightness/contrast (+ saturation/hue on RGB) jitter',
    3: 'random affine shift + random crop, zero fill',
}


@dataclass(frozen=True)
class AugConfig:
    brightness: float = 0.2
    contrast_low: float = 0.8
    contrast_high: float = 1.2
    saturation: float = 0.2
    hue: float = 0.05
    max_shift: int = 2


def horizontal_flip(image):
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def vertical_flip(image):
    return np.ascontiguousarray(np.asarray(image)[..., ::-1, :])


def _per_image_mean(x):
    return x.mean(axis=(-3, -2, -1), keepdims=True)


def _rgb_to_gray(x):
    weights = np.array([0.299, 0.587, 0.114]).reshape(3, 1, 1)
    return np.sum(x * weights, axis=-3, keepdims=True)


def _rotate_hue(x, turns):
    # rotation about the grey axis of RGB space
    angle = 2 * np.pi * turns
    cos, sin = np.cos(angle), np.sin(angle)
    k = 1.0 / 3.0
    s = np.sqrt(k)
    m = np.array([
        [cos + (1 - cos) * k, k * (1 - cos) - s * sin, k * (1 - cos) + s * sin],
        [k * (1 - cos) + s * sin, cos + k * (1 - cos), k * (1 - cos) - s * sin],
        [k * (1 - cos) - s * sin, k * (1 - cos) + s * sin, cos + k * (1 - cos)],
    ])
    return np.einsum('ij,...jhw->...ihw', m, x)


def color_jitter(image, brightness_delta, contrast_factor, saturation_factor=1.0, hue_delta=0.0):
    """clip(contrast * (x - mean) + mean + brightness, 0, 1); saturation/hue only when C == 3."""
    x = np.asarray(image, dtype=np.float64)
    mean = _per_image_mean(x)
    x = np.clip(contrast_factor * (x - mean) + mean + brightness_delta, 0.0, 1.0)
    if x.shape[-3] == 3:
        if saturation_factor != 1.0:
            gray = _rgb_to_gray(x)
            x = np.clip(gray + saturation_factor * (x - gray), 0.0, 1.0)
        if hue_delta != 0.0:
            x = np.clip(_rotate_hue(x, hue_delta), 0.0, 1.0)
    return x


def shift(image, dy, dx):
    """Integer translation; vacated pixels are zero."""
    x = np.asarray(image, dtype=np.float64)
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = x[..., src_y, src_x]
    return out


def random_crop_pad(image, max_shift, rng):
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    return shift(image, int(dy), int(dx))


def apply_strategy(strategy, images, config, rng):
    if strategy == 1:
        return horizontal_flip(vertical_flip(images))
    if strategy == 2:
        brightness = rng.uniform(-config.brightness, config.brightness)
        contrast = rng.uniform(config.contrast_low, config.contrast_high)
        saturation = rng.uniform(1 - config.saturation, 1 + config.saturation)
        hue = rng.uniform(-config.hue, config.hue)
        return color_jitter(images, brightness, contrast, saturation, hue)
    if strategy == 3:
        moved = random_crop_pad(images, config.max_shift, rng)
        return random_crop_pad(moved, config.max_shift, rng)
    raise ContractError(f"unknown augmentation strategy {strategy}")


def strategy_for(i):
    """Strategy id of the i-th augmented set (0-based); ids repeat past 3."""
    return i % len(STRATEGIES) + 1


def cluster_loss(params, images, label, aggregation='attention'):
    logits = meta_example_logits(params, images, aggregation)
    return T.cross_entropy(logits, [label]).item()


def query_loss(params, images, labels):
    return T.cross_entropy(forward(params, images), labels).item()


def select_cluster_variant(params, images, label, m, config, rng, aggregation='attention'):
    """Highest-loss augmented copy of a single-label set (ties go to the lowest index)."""
    variants = [apply_strategy(strategy_for(i), images, config, rng) for i in range(m)]
    losses = np.array([cluster_loss(params, v, label, aggregation) for v in variants])
    best = int(np.argmax(losses))
    return variants[best], best, losses


def select_query_variant(params, images, labels, m, config, rng):
    variants = [apply_strategy(strategy_for(i), images, config, rng) for i in range(m)]
    losses = np.array([query_loss(params, v, labels) for v in variants])
    best = int(np.argmax(losses))
    return variants[best], best, losses


@dataclass(frozen=True)
class Selection:
    episode: object
    cluster_index: int
    query_index: int
    cluster_losses: np.ndarray
    query_losses: np.ndarray


def memlx_select(params, episode, m=3, config=None, rng=None, aggregation='attention'):
    """Swap the episode's sets for their worst-case augmented variants.

    The cluster set is scored through the meta-example path, the query set
    per sample; the two choices are independent. Parameters are only read.
    """
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    config = config or AugConfig()
    rng = rng if rng is not None else make_rng(0, "memlx")
    cluster_x, ci, c_losses = select_cluster_variant(
        params, episode.cluster_x, episode.cluster_label, m, config, rng, aggregation)
    query_x, qi, q_losses = select_query_variant(params, episode.query_x, episode.query_y, m, config, rng)
    return Selection(episode.replace_images(cluster_x, query_x), ci, qi, c_losses, q_losses)
