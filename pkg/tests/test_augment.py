import sys
import os
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from augment import (AugConfig, apply_strategy, cluster_loss, color_jitter, horizontal_flip, memlx_select,
                     query_loss, random_crop_pad, shift, strategy_for, vertical_flip)
from cluster import build_task_distribution, sample_task
from data import make_synthetic_fewshot
from errors import ContractError
from model import Architecture, init_model
from rng import make_rng


@pytest.fixture
def image():
    return np.arange(9, dtype=np.float64).reshape(1, 3, 3) / 8


@pytest.fixture
def setup():
    dataset = make_synthetic_fewshot(5, (6, 9), 14, 0.1, seed=0)
    distribution = build_task_distribution(dataset.labels, query_random_count=4)
    arch = Architecture(input_shape=(1, 14, 14), num_classes=5, backbone='mlp', mlp_hidden=(12,), cln_hidden=(8,))
    return dataset, distribution, arch


def test_flips(image):
    assert np.array_equal(horizontal_flip(image)[0, 0], image[0, 0, ::-1])
    assert np.array_equal(vertical_flip(image)[0, :, 0], image[0, ::-1, 0])
    assert np.array_equal(horizontal_flip(horizontal_flip(image)), image)
    batch = np.stack([image, image * 0.5])
    assert np.array_equal(vertical_flip(batch)[1], vertical_flip(image * 0.5))


def test_color_jitter_identity_and_range(image):
    assert np.allclose(color_jitter(image, 0.0, 1.0), image)
    out = color_jitter(image, 0.9, 3.0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_color_jitter_contrast_keeps_mean(image):
    out = color_jitter(image * 0.5 + 0.25, 0.0, 0.5)
    assert out.mean() == pytest.approx((image * 0.5 + 0.25).mean())


def test_saturation_and_hue_only_on_rgb():
    gray = make_rng(0, 'img').random((1, 4, 4))
    assert np.allclose(color_jitter(gray, 0.0, 1.0, 0.5, 0.1), gray)
    rgb = make_rng(1, 'img').random((3, 4, 4)) * 0.5 + 0.25
    out = color_jitter(rgb, 0.0, 1.0, 0.5, 0.1)
    assert not np.allclose(out, rgb)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_shift_zero_fills(image):
    moved = shift(image, 1, -1)
    assert np.array_equal(moved[0, 1:, :2], image[0, :2, 1:])
    assert np.all(moved[0, 0] == 0) and np.all(moved[0, :, 2] == 0)
    assert np.all(shift(image, 3, 0) == 0)


def test_random_crop_pad_stays_in_range(image):
    rng = make_rng(0, 'crop')
    for _ in range(20):
        out = random_crop_pad(image, 1, rng)
        assert out.shape == image.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_strategies(image):
    rng = make_rng(0, 'strategy')
    config = AugConfig()
    both = apply_strategy(1, image, config, rng)
    assert np.array_equal(both[0], image[0, ::-1, ::-1])
    for strategy in (2, 3):
        out = apply_strategy(strategy, image, config, rng)
        assert out.shape == image.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(ContractError):
        apply_strategy(4, image, config, rng)


def test_strategy_cycle():
    assert [strategy_for(i) for i in range(7)] == [1, 2, 3, 1, 2, 3, 1]


def test_memlx_rejects_m_zero(setup):
    dataset, distribution, arch = setup
    params = init_model(arch, make_rng(0, 'init'))
    episode = sample_task(distribution, dataset.images, make_rng(0, 'task'))
    with pytest.raises(ContractError):
        memlx_select(params, episode, m=0)


def test_memlx_m_one_uses_double_flip(setup):
    dataset, distribution, arch = setup
    params = init_model(arch, make_rng(0, 'init'))
    episode = sample_task(distribution, dataset.images, make_rng(1, 'task'))
    selection = memlx_select(params, episode, m=1, rng=make_rng(0, 'memlx'))
    assert selection.cluster_index == 0 and selection.query_index == 0
    assert np.array_equal(selection.episode.cluster_x, episode.cluster_x[..., ::-1, ::-1])
    assert np.array_equal(selection.episode.cluster_ids, episode.cluster_ids)


def check_max_loss_selection(dataset, distribution, arch, trial):
    """Variants regenerated from the same stream; the chosen set has the highest loss."""
    params = init_model(arch, make_rng(trial, 'init'))
    episode = sample_task(distribution, dataset.images, make_rng(trial, 'task'))
    before = params.snapshot()

    selection = memlx_select(params, episode, m=3, rng=make_rng(trial, 'memlx'))

    replay = make_rng(trial, 'memlx')
    config = AugConfig()
    cluster_variants = [apply_strategy(strategy_for(i), episode.cluster_x, config, replay) for i in range(3)]
    query_variants = [apply_strategy(strategy_for(i), episode.query_x, config, replay) for i in range(3)]
    c_losses = [cluster_loss(params, v, episode.cluster_label) for v in cluster_variants]
    q_losses = [query_loss(params, v, episode.query_y) for v in query_variants]

    assert c_losses[selection.cluster_index] == max(c_losses)
    assert q_losses[selection.query_index] == max(q_losses)
    assert np.array_equal(selection.episode.cluster_x, cluster_variants[selection.cluster_index])
    assert np.array_equal(selection.episode.query_x, query_variants[selection.query_index])
    after = params.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


@pytest.mark.parametrize('trial', range(25))
def test_memlx_picks_the_max_loss_variant(setup, trial):
    check_max_loss_selection(*setup, trial)


@pytest.mark.slow
def test_memlx_picks_the_max_loss_variant_many_episodes(setup):
    for trial in range(1000):
        check_max_loss_selection(*setup, trial)


def test_memlx_ties_go_to_lowest_index(setup):
    """Blank images with jitter disabled: all variants are equal, so index 0 wins."""
    _, _, arch = setup
    params = init_model(arch, make_rng(0, 'init'))
    dataset = make_synthetic_fewshot(2, (3, 3), 14, 0.0, seed=0)
    blank = np.zeros_like(dataset.images)
    distribution = build_task_distribution(dataset.labels, query_random_count=1)
    episode = sample_task(distribution, blank, make_rng(0, 'task'))
    selection = memlx_select(params, episode, m=3, config=AugConfig(brightness=0.0, contrast_low=1.0,
                                                                    contrast_high=1.0, saturation=0.0, hue=0.0))
    assert selection.cluster_index == 0
    assert selection.query_index == 0
