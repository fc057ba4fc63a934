from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch
from scipy import ndimage

from progseg.core.errors import (
    ChannelMismatch,
    EmptyDataset,
    IndivisibleDimensions,
    InvalidConfig,
    MissingPatchSet,
    SizeMismatch,
)
from progseg.managers import model_manager
from progseg.managers.loss_manager import one_hot, predictions_from_logits
from progseg.managers.model_manager import ModelSpec, build_model, load_checkpoint
from progseg.managers.patch_manager import Patch, PatchOrigin, PatchSet, Split, build_patch_sets, load_tiles
from progseg.managers.raster_manager import LabelClass, LabelMask, MultispectralImage, ValueDomain
from progseg.managers.synth_manager import generate_dataset
from progseg.managers.train_manager import (
    AugmentDraw,
    AugmentParams,
    PatchDataset,
    StageConfig,
    StagePlan,
    apply_augmentation,
    draw_augmentation,
    evaluate,
    group_learning_rates,
    individual_baseline,
    predict_map,
    run_progressive,
    save_history_csv,
    train_stage,
)

from .conftest import RGB


def _labelled_patch(rng, size=64, tile_id="t", row=0, labels=None):
    """RGB patch whose first band encodes the label (label / 2)."""
    if labels is None:
        labels = rng.integers(0, 3, (size, size)).astype(np.uint8)
    data = rng.random((size, size, 3), dtype=np.float32)
    data[..., 0] = labels / 2.0
    img = MultispectralImage(data=data, bands=RGB, value_domain=ValueDomain.UNIT_NORMALIZED)
    return Patch(image=img, mask=LabelMask(labels), origin=PatchOrigin(tile_id, row, 0), size=size)


def _patch_set(rng, n, split=Split.TRAIN, size=64):
    return PatchSet([_labelled_patch(rng, size, row=i * size) for i in range(n)], size, RGB, split)


class _StubModel(torch.nn.Module):
    """Fixed-rule classifier with the attributes model_manager.forward relies on."""
    downsampling = 1

    def __init__(self, rule):
        super().__init__()
        self.spec = ModelSpec(in_channels=3)
        self.anchor = torch.nn.Parameter(torch.zeros(1))
        self.rule = rule

    def forward(self, x):
        return self.rule(x).permute(0, 3, 1, 2)


def _oracle(x):
    return one_hot(torch.round(x[:, 0] * 2).long(), 3) * 10.0


def _all_other(x):
    logits = torch.zeros(x.shape[0], x.shape[2], x.shape[3], 3)
    logits[..., LabelClass.OTHER] = 1.0
    return logits


# --- Plans ---

def test_stage_config_validation():
    with pytest.raises(InvalidConfig):
        StageConfig(patch_size=100)
    with pytest.raises(InvalidConfig):
        StageConfig(patch_size=64, frozen_epochs=0, finetune_epochs=0)
    with pytest.raises(InvalidConfig):
        StageConfig(patch_size=64, lr_head=1e-4, lr_base=1e-3)
    with pytest.raises(InvalidConfig):
        StagePlan(())
    with pytest.raises(InvalidConfig):
        StagePlan.from_sizes([128, 64])


def test_individual_baseline_keeps_epoch_budget():
    plan = StagePlan.from_sizes([64, 128, 256], frozen_epochs=1, finetune_epochs=3)
    baseline = individual_baseline(plan)
    assert baseline.sizes == [256]
    assert baseline.total_epochs == plan.total_epochs == 12
    assert baseline.stages[0].frozen_epochs == 1


def test_group_learning_rates_ramp():
    cfg = StageConfig(patch_size=64, lr_head=1e-2, lr_base=1e-4)
    lrs = group_learning_rates(cfg)
    assert lrs[0] == pytest.approx(1e-4)
    assert lrs[-1] == 1e-2
    assert all(a < b for a, b in zip(lrs, lrs[1:]))


# --- Augmentation ---

def test_augment_params_validation():
    with pytest.raises(InvalidConfig):
        AugmentParams(zoom=(1.2, 0.8))
    with pytest.raises(InvalidConfig):
        AugmentParams(brightness=1.5)


def test_hflip_is_an_involution(rng):
    patch = _labelled_patch(rng)
    draw = AugmentDraw(hflip=True)
    twice = apply_augmentation(apply_augmentation(patch, draw), draw)
    np.testing.assert_array_equal(twice.image.data, patch.image.data)
    np.testing.assert_array_equal(twice.mask.data, patch.mask.data)
    once = apply_augmentation(patch, draw)
    np.testing.assert_array_equal(once.mask.data, patch.mask.data[:, ::-1])


def test_brightness_scales_and_leaves_mask(rng):
    patch = _labelled_patch(rng)
    patch.image.data[...] = 0.4
    out = apply_augmentation(patch, AugmentDraw(brightness=0.5))
    np.testing.assert_allclose(out.image.data, 0.6, atol=1e-6)
    np.testing.assert_array_equal(out.mask.data, patch.mask.data)


def test_rotation_keeps_image_and_mask_co_registered(rng):
    patch = _labelled_patch(rng)
    out = apply_augmentation(patch, AugmentDraw(rotation_deg=90.0))
    np.testing.assert_array_equal(out.mask.data, np.rot90(patch.mask.data))
    np.testing.assert_allclose(out.image.data, np.rot90(patch.image.data), atol=1e-5)
    np.testing.assert_array_equal(np.round(out.image.data[..., 0] * 2).astype(np.uint8), out.mask.data)


def test_pixels_from_outside_become_other(rng):
    patch = _labelled_patch(rng, labels=np.full((64, 64), LabelClass.FLOOD, dtype=np.uint8))
    out = apply_augmentation(patch, AugmentDraw(zoom=0.5))
    assert out.mask.data[0, 0] == LabelClass.OTHER
    assert out.mask.data[32, 32] == LabelClass.FLOOD


def _inverse_affine(draw, size):
    """Output-to-input homogeneous matrix from the forward transform flip(R * zoom * (p - c) + c + shift)."""
    centre = (size - 1) / 2.0
    theta = np.radians(draw.rotation_deg)
    forward = np.eye(3)
    forward[:2, :2] = draw.zoom * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    to_origin, from_origin, flip = np.eye(3), np.eye(3), np.eye(3)
    to_origin[:2, 2] = -centre
    from_origin[:2, 2] = centre + np.asarray(draw.shift)
    for axis, flipped in enumerate((draw.vflip, draw.hflip)):
        if flipped:
            flip[axis, axis], flip[axis, 2] = -1.0, size - 1
    return np.linalg.inv(flip @ from_origin @ forward @ to_origin)


@pytest.mark.parametrize("seed", range(20))
def test_random_draws_match_affine_resampling(seed):
    size = 64
    rng = np.random.default_rng(seed)
    patch = _labelled_patch(rng, size)
    draw = draw_augmentation(AugmentParams(), rng, size)
    out = apply_augmentation(patch, draw)

    inverse = _inverse_affine(draw, size)
    matrix, offset = inverse[:2, :2], inverse[:2, 2]
    expected_mask = ndimage.affine_transform(patch.mask.data, matrix, offset, order=0,
                                             mode="constant", cval=LabelClass.OTHER)
    # Nearest-neighbour ties (a source coordinate on a half pixel) and sources in the one-pixel
    # band just outside the grid may round either way, so those pixels are left out.
    rows, cols = np.mgrid[0:size, 0:size]
    src = np.tensordot(matrix, np.stack([rows, cols]).astype(np.float64), axes=1) + offset[:, None, None]
    tie = (np.abs(src - np.floor(src) - 0.5) < 1e-6).any(axis=0)
    edge = (((src > -1.0) & (src < 0.0)) | ((src > size - 1) & (src < size))).any(axis=0)
    settled = ~(tie | edge)
    assert settled.mean() > 0.85
    np.testing.assert_array_equal(out.mask.data[settled], expected_mask[settled])

    expected_image = np.stack([
        ndimage.affine_transform(patch.image.data[..., i], matrix, offset, order=1, mode="reflect")
        for i in range(patch.image.data.shape[-1])
    ], axis=-1)
    geometric = apply_augmentation(patch, replace(draw, brightness=0.0, contrast=0.0))
    np.testing.assert_allclose(geometric.image.data, expected_image, atol=1e-4)


def test_patch_dataset_is_seeded_per_epoch(rng):
    patch_set = _patch_set(rng, 2)
    a, b = PatchDataset(patch_set, AugmentParams(), seed=7), PatchDataset(patch_set, AugmentParams(), seed=7)
    x_a, y_a = a[0]
    x_b, y_b = b[0]
    assert torch.equal(x_a, x_b) and torch.equal(y_a, y_b)
    assert y_a.dtype == torch.int64 and x_a.shape == (64, 64, 3)
    b.set_epoch(1)
    assert not torch.equal(x_a, b[0][0])


# --- Evaluation ---

def test_evaluate_perfect_and_all_other(rng):
    val = _patch_set(rng, 3, Split.VAL)
    report = evaluate(_StubModel(_oracle), val)
    assert report["miou"] == 1.0
    assert report["f1"] == 1.0
    assert report["n_patches"] == 3

    report = evaluate(_StubModel(_all_other), val)
    other_share = np.mean([np.mean(p.mask.data == LabelClass.OTHER) for p in val])
    assert report["recall"] == pytest.approx(other_share)
    assert report["per_class_recall"]["OTHER"] == 1.0


def test_evaluate_errors(rng, rgb_spec):
    with pytest.raises(EmptyDataset):
        evaluate(_StubModel(_oracle), PatchSet([], 64, RGB, Split.VAL))
    model = build_model(ModelSpec(in_channels=4, head=rgb_spec.head), seed=0)
    with pytest.raises(ChannelMismatch):
        evaluate(model, _patch_set(rng, 1, Split.VAL))


def test_predict_map_stitches_tiles(rng):
    labels = rng.integers(0, 3, (128, 192)).astype(np.uint8)
    data = rng.random((128, 192, 3), dtype=np.float32)
    data[..., 0] = labels / 2.0
    img = MultispectralImage(data=data, bands=RGB, value_domain=ValueDomain.UNIT_NORMALIZED)
    mask = predict_map(_StubModel(_oracle), img, tile_size=64)
    np.testing.assert_array_equal(mask.data, labels)
    with pytest.raises(IndivisibleDimensions):
        predict_map(_StubModel(_oracle), img, tile_size=48)


def test_predict_map_single_tile_matches_forward(make_image, rgb_spec):
    model = build_model(rgb_spec, seed=0).eval()
    img = make_image(64, 64, RGB)
    with torch.no_grad():
        expected = predictions_from_logits(model_manager.forward(model, img.data[None]))[0]
    np.testing.assert_array_equal(predict_map(model, img, 64).data, expected)


# --- Training ---

def test_frozen_phase_leaves_backbone_untouched(rng, rgb_spec):
    model = build_model(rgb_spec, seed=0)
    before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    head_before = {k: v.clone() for k, v in model.head.state_dict().items()}
    cfg = StageConfig(patch_size=64, frozen_epochs=1, finetune_epochs=0, batch_size=2)
    model, history = train_stage(model, _patch_set(rng, 4), _patch_set(rng, 2, Split.VAL), cfg)
    for name, value in model.backbone.state_dict().items():
        assert torch.equal(value, before[name]), name
    assert any(not torch.equal(v, head_before[k]) for k, v in model.head.state_dict().items())
    assert [r.phase for r in history.records] == ["frozen"]
    assert model.stage_history == [(64, 1)]
    assert all(p.requires_grad for p in model.backbone.parameters())


def test_train_stage_is_reproducible(rng, rgb_spec):
    train, val = _patch_set(rng, 4), _patch_set(rng, 2, Split.VAL)
    cfg = StageConfig(patch_size=64, frozen_epochs=1, finetune_epochs=1, batch_size=2)
    _, first = train_stage(build_model(rgb_spec, seed=0), train, val, cfg, seed=3)
    _, second = train_stage(build_model(rgb_spec, seed=0), train, val, cfg, seed=3)
    assert first.comparable() == second.comparable()
    assert [r.epoch for r in first.records] == [0, 1]
    assert first.best_val_miou == max(r.val_miou for r in first.records)


def test_train_stage_rejects_bad_inputs(rng, rgb_spec):
    model = build_model(rgb_spec, seed=0)
    cfg = StageConfig(patch_size=128, frozen_epochs=0, finetune_epochs=1)
    with pytest.raises(SizeMismatch):
        train_stage(model, _patch_set(rng, 2), _patch_set(rng, 1, Split.VAL), cfg)
    cfg = StageConfig(patch_size=64, frozen_epochs=0, finetune_epochs=1)
    with pytest.raises(EmptyDataset):
        train_stage(model, PatchSet([], 64, RGB, Split.TRAIN), _patch_set(rng, 1, Split.VAL), cfg)
    wide = build_model(ModelSpec(in_channels=4, head=rgb_spec.head), seed=0)
    with pytest.raises(ChannelMismatch):
        train_stage(wide, _patch_set(rng, 2), _patch_set(rng, 1, Split.VAL), cfg)


@pytest.fixture
def patch_root(tmp_path, small_scene):
    manifest = generate_dataset(4, small_scene, seed=11, out_dir=tmp_path / "tiles", workers=2)
    tiles = load_tiles(manifest, RGB)
    ids = sorted(t[0] for t in tiles)
    build_patch_sets(tiles, [64, 128], (set(ids[:3]), set(ids[3:])), tmp_path / "data",
                     tile_other_threshold=1.0, patch_other_threshold=1.0)
    return tmp_path / "data"


def test_run_progressive_single_stage(patch_root, rgb_spec):
    plan = StagePlan.from_sizes([64], frozen_epochs=0, finetune_epochs=1, batch_size=4)
    ckpt, histories = run_progressive(plan, patch_root, RGB, model_spec=rgb_spec, augment_params=None)
    assert len(histories) == 1
    assert ckpt.stage_history == [(64, 1)]
    assert ckpt.bands == RGB


def test_run_progressive_hands_weights_to_next_stage(patch_root, tmp_path, rgb_spec):
    seen = {}

    def _capture(index, stage, model):
        seen[index] = {k: v.detach().clone() for k, v in model.state_dict().items()}

    plan = StagePlan.from_sizes([64, 128], frozen_epochs=0, finetune_epochs=1, batch_size=4)
    ckpt, histories = run_progressive(plan, patch_root, RGB, model_spec=rgb_spec, augment_params=None,
                                      checkpoint_dir=tmp_path / "ckpt", on_stage_start=_capture)
    assert [h.patch_size for h in histories] == [64, 128]
    assert ckpt.stage_history == [(64, 1), (128, 1)]
    first = load_checkpoint(tmp_path / "ckpt" / "stage_0_64.ckpt")
    for name, value in first.weights.items():
        np.testing.assert_array_equal(seen[1][name].numpy(), value, err_msg=name)

    frame = pd.read_csv(save_history_csv(histories, tmp_path / "history.csv"))
    assert len(frame) == 2
    assert {"stage", "patch_size", "phase", "val_miou", "val_f1"} <= set(frame.columns)


def test_run_progressive_missing_patch_set(tmp_path):
    with pytest.raises(MissingPatchSet):
        run_progressive(StagePlan.from_sizes([64]), tmp_path, RGB)
