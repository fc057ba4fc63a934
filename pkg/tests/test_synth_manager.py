import json
import math
from dataclasses import replace

import numpy as np
import pytest

from progseg.core.errors import InvalidConfig, OverfullScene
from progseg.managers.raster_manager import BandId, LabelClass, load_pair
from progseg.managers.synth_manager import (
    SceneParams,
    derive_tile_seeds,
    expected_other_fraction,
    generate_dataset,
    generate_scene,
    spectral_means,
)


def test_scene_shapes_and_domain(small_scene):
    img, mask = generate_scene(small_scene)
    assert img.data.shape == (128, 128, 7)
    assert mask.shape == (128, 128)
    assert 0.0 <= img.data.min() and img.data.max() <= 1.0


def test_scene_is_deterministic(small_scene):
    a_img, a_mask = generate_scene(replace(small_scene, seed=9))
    b_img, b_mask = generate_scene(replace(small_scene, seed=9))
    assert a_img == b_img and a_mask == b_mask
    c_img, _ = generate_scene(replace(small_scene, seed=10))
    assert not c_img == a_img


def test_no_pivots_means_no_sprinkler(small_scene):
    _, mask = generate_scene(replace(small_scene, n_pivots=0, seed=4))
    assert not (mask.data == LabelClass.SPRINKLER).any()
    assert (mask.data == LabelClass.FLOOD).any()


def test_pivot_is_a_disc(small_scene):
    _, mask = generate_scene(replace(small_scene, n_pivots=1, n_floods=0, seed=2))
    rows, cols = np.nonzero(mask.data == LabelClass.SPRINKLER)
    height, width = np.ptp(rows) + 1, np.ptp(cols) + 1
    assert height == width and height % 2 == 1
    radius = height // 2
    assert 8 <= radius <= 16
    assert rows.size == pytest.approx(math.pi * radius ** 2, rel=0.15)


def test_flood_is_a_filled_rectangle(small_scene):
    _, mask = generate_scene(replace(small_scene, n_pivots=0, n_floods=1, seed=2))
    rows, cols = np.nonzero(mask.data == LabelClass.FLOOD)
    height, width = np.ptp(rows) + 1, np.ptp(cols) + 1
    assert rows.size == height * width
    assert 12 <= height <= 28 and 12 <= width <= 28


def test_overfull_scene():
    params = SceneParams(size=(32, 32), n_pivots=5, n_floods=0, pivot_radius=(10, 12))
    with pytest.raises(OverfullScene):
        generate_scene(params)


def test_scene_params_validation():
    with pytest.raises(InvalidConfig):
        SceneParams(pivot_radius=(10, 5))
    with pytest.raises(InvalidConfig):
        SceneParams(n_bands=4, nir_only_class=True)
    with pytest.raises(InvalidConfig):
        SceneParams(coverage_cap=0.0)


def test_class_means_follow_profile(small_scene):
    params = replace(small_scene, size=(192, 192), texture_amplitude=0.0, seed=1)
    img, mask = generate_scene(params)
    means = spectral_means(params)
    sigma = math.hypot(params.profile_sigma, params.noise_sigma)
    other = img.data[mask.data == LabelClass.OTHER].astype(np.float64)
    np.testing.assert_allclose(other.mean(axis=0), means[LabelClass.OTHER], atol=0.005)
    np.testing.assert_allclose(other.std(axis=0), sigma, rtol=0.1)


def test_nir_only_profile_table():
    table = spectral_means(SceneParams(nir_only_class=True))
    nir = int(BandId.NIR)
    others = [b for b in range(table.shape[1]) if b != nir]
    np.testing.assert_array_equal(table[LabelClass.FLOOD, others], table[LabelClass.OTHER, others])
    assert table[LabelClass.FLOOD, nir] != table[LabelClass.OTHER, nir]


def _linear_fit_accuracy(features, target, train):
    """Class-balanced least-squares linear classifier; balanced accuracy on the held-out pixels."""
    design = np.column_stack([features, np.ones(len(features))])
    signs = np.where(target, 1.0, -1.0)
    weights = np.where(target, 1.0 / target[train].sum(), 1.0 / (~target[train]).sum())
    root = np.sqrt(weights[train])[:, None]
    coef, *_ = np.linalg.lstsq(design[train] * root, signs[train] * root[:, 0], rcond=None)
    predicted = design[~train] @ coef > 0
    held = target[~train]
    return (np.mean(predicted[held]) + np.mean(~predicted[~held])) / 2


def test_nir_only_class_needs_nir(small_scene):
    params = replace(small_scene, n_pivots=0, n_floods=3, nir_only_class=True, seed=6)
    img, mask = generate_scene(params)
    keep = mask.data != LabelClass.SPRINKLER
    target = (mask.data == LabelClass.FLOOD)[keep]
    train = (np.indices(mask.shape)[1] % 2 == 0)[keep]
    rgb = np.stack([img.band(b)[keep] for b in (BandId.BLUE, BandId.GREEN, BandId.RED)], axis=1)
    with_nir = np.column_stack([rgb, img.band(BandId.NIR)[keep]])
    assert 0.0 < target.mean() < 0.5
    # balanced chance level is 0.5
    assert abs(_linear_fit_accuracy(rgb, target, train) - 0.5) < 0.05
    assert _linear_fit_accuracy(with_nir, target, train) > 0.95


def test_derived_seeds_are_prefix_stable():
    assert derive_tile_seeds(5, 3) == derive_tile_seeds(5, 10)[:3]
    assert len(set(derive_tile_seeds(5, 10))) == 10


def test_generate_dataset(tmp_path, small_scene):
    first = generate_dataset(10, small_scene, seed=21, out_dir=tmp_path / "a", workers=3)
    second = generate_dataset(10, small_scene, seed=21, out_dir=tmp_path / "b", workers=1)
    manifest = json.loads(first.read_text())
    assert manifest == json.loads(second.read_text())
    assert [t["tile_id"] for t in manifest["tiles"]] == [f"tile_{i:04d}" for i in range(10)]

    img, mask = load_pair(first.parent / manifest["tiles"][0]["path"])
    assert img.data.shape == (128, 128, 7)
    assert float(np.mean(mask.data == LabelClass.OTHER)) == manifest["tiles"][0]["other_fraction"]

    coverage = np.mean([t["other_fraction"] for t in manifest["tiles"]])
    assert abs(coverage - expected_other_fraction(small_scene)) < 0.1


def test_generate_dataset_needs_two_tiles(tmp_path, small_scene):
    with pytest.raises(InvalidConfig):
        generate_dataset(1, small_scene, seed=0, out_dir=tmp_path)
