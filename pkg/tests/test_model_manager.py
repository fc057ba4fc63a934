import json
import struct

import numpy as np
import pytest
import torch

from progseg.core.errors import (
    BandSubsetViolation,
    ChannelMismatch,
    CorruptFile,
    InvalidConfig,
    MissingWeight,
    NonDivisibleSize,
    ShapeMismatch,
    SpecMismatch,
    UnsupportedBackbone,
)
from progseg.managers.model_manager import (
    Backbone,
    HeadSpec,
    ModelSpec,
    build_model,
    checkpoint_from_model,
    extend_input_channels,
    first_conv_weight_name,
    forward,
    load_checkpoint,
    model_from_checkpoint,
    register_backbone,
    save_checkpoint,
    transfer_weights,
)
from progseg.managers.raster_manager import BandId

from .conftest import RGB, RGBN

SIX = [BandId.BLUE, BandId.GREEN, BandId.RED, BandId.SWIR1, BandId.SWIR2, BandId.NIR]


def _eval_logits(model, x):
    model.eval()
    with torch.no_grad():
        return forward(model, x).numpy()


def test_spec_validation(small_head):
    with pytest.raises(UnsupportedBackbone):
        ModelSpec(in_channels=3, backbone="VGG")
    with pytest.raises(InvalidConfig):
        ModelSpec(in_channels=3, fully_convolutional=False)
    with pytest.raises(InvalidConfig):
        ModelSpec(in_channels=3, n_classes=1)
    with pytest.raises(InvalidConfig):
        ModelSpec(in_channels=3, backbone=Backbone.CUSTOM)
    with pytest.raises(InvalidConfig):
        HeadSpec(dropout_rate=1.0)
    spec = ModelSpec(in_channels=4, head=small_head)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_unregistered_custom_backbone():
    spec = ModelSpec(in_channels=3, backbone=Backbone.CUSTOM, custom_backbone="not-registered")
    with pytest.raises(UnsupportedBackbone):
        build_model(spec, seed=0)


def test_forward_shape(rgb_spec):
    model = build_model(rgb_spec, seed=0)
    logits = forward(model, np.zeros((2, 64, 64, 3), dtype=np.float32))
    assert tuple(logits.shape) == (2, 64, 64, 3)
    assert torch.isfinite(logits).all()


def test_forward_six_channels_batch_of_sixteen(small_head):
    model = build_model(ModelSpec(in_channels=6, head=small_head), seed=0)
    logits = _eval_logits(model, np.random.default_rng(0).random((16, 256, 256, 6), dtype=np.float32))
    assert logits.shape == (16, 256, 256, 3)


def test_same_seed_same_weights(rgb_spec):
    a = checkpoint_from_model(build_model(rgb_spec, seed=11), RGB, 11)
    b = checkpoint_from_model(build_model(rgb_spec, seed=11), RGB, 11)
    c = checkpoint_from_model(build_model(rgb_spec, seed=12), RGB, 11)
    assert a == b
    assert a != c


def test_one_weight_set_serves_every_patch_size(rgb_spec, rng):
    model = build_model(rgb_spec, seed=0)
    for size in (64, 128, 256):
        assert _eval_logits(model, rng.random((1, size, size, 3), dtype=np.float32)).shape == (1, size, size, 3)


def test_eval_mode_is_deterministic(rgb_spec, rng):
    model = build_model(rgb_spec, seed=0)
    x = rng.random((2, 32, 32, 3), dtype=np.float32)
    np.testing.assert_array_equal(_eval_logits(model, x), _eval_logits(model, x))


def test_forward_errors(rgb_spec):
    model = build_model(rgb_spec, seed=0)
    with pytest.raises(ChannelMismatch):
        forward(model, np.zeros((1, 64, 64, 4), dtype=np.float32))
    with pytest.raises(NonDivisibleSize):
        forward(model, np.zeros((1, 40, 40, 3), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((64, 64, 3), dtype=np.float32))


@pytest.mark.parametrize("backbone, custom", [(Backbone.UNET_ENCODER, None), (Backbone.CUSTOM, "resnet18")])
def test_other_backbones(small_head, backbone, custom):
    spec = ModelSpec(in_channels=3, backbone=backbone, custom_backbone=custom, head=small_head)
    model = build_model(spec, seed=0)
    assert _eval_logits(model, np.zeros((1, 64, 64, 3), dtype=np.float32)).shape == (1, 64, 64, 3)
    assert first_conv_weight_name(spec) in model.state_dict()
    assert len(model.parameter_groups()) == 5


def test_register_custom_backbone(small_head):
    from progseg.managers.model_manager import SmallResNet

    register_backbone("tiny", lambda c: SmallResNet(c, widths=(8, 8, 8, 8)), SmallResNet.first_conv)
    spec = ModelSpec(in_channels=2, backbone=Backbone.CUSTOM, custom_backbone="tiny", head=small_head)
    model = build_model(spec, seed=0)
    assert model.backbone.out_channels == 8


def test_transfer_between_patch_sizes(rgb_spec, rng):
    trained = build_model(rgb_spec, seed=1)
    trained.stage_history = [(64, 3)]
    ckpt = checkpoint_from_model(trained, RGB, 1)
    fresh = transfer_weights(build_model(rgb_spec, seed=2), ckpt)
    assert fresh.stage_history == [(64, 3)]
    assert checkpoint_from_model(fresh, RGB, 1) == ckpt
    x = rng.random((1, 128, 128, 3), dtype=np.float32)
    np.testing.assert_array_equal(_eval_logits(fresh, x), _eval_logits(trained, x))


def test_transfer_rejects_channel_mismatch(rgb_spec, small_head):
    ckpt = checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0)
    with pytest.raises(SpecMismatch):
        transfer_weights(build_model(ModelSpec(in_channels=6, head=small_head), seed=0), ckpt)


def test_transfer_missing_weight(rgb_spec):
    ckpt = checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0)
    del ckpt.weights[next(iter(ckpt.weights))]
    with pytest.raises(MissingWeight):
        transfer_weights(build_model(rgb_spec, seed=0), ckpt)


def test_checkpoint_file_round_trip(tmp_path, rgb_spec):
    model = build_model(rgb_spec, seed=5)
    model.stage_history = [(64, 2), (128, 4)]
    ckpt = checkpoint_from_model(model, RGB, 5)
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "m.ckpt"))
    assert loaded == ckpt
    assert loaded.stage_history == [(64, 2), (128, 4)]
    assert checkpoint_from_model(model_from_checkpoint(loaded), RGB, 5) == ckpt


def test_checkpoint_corruption(tmp_path, rgb_spec):
    path = save_checkpoint(checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:5])
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "cut.ckpt").write_bytes(raw[:-100])
    for name in ("short.ckpt", "magic.ckpt", "cut.ckpt"):
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / name)


def test_checkpoint_band_count_must_match_spec(rgb_spec):
    model = build_model(rgb_spec, seed=0)
    with pytest.raises(ChannelMismatch):
        checkpoint_from_model(model, RGBN, 0)


# --- Channel extension ---

def test_extend_identity(rgb_spec):
    ckpt = checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0)
    assert extend_input_channels(ckpt, RGB) == ckpt


def test_extend_mean_of_identical_kernels(rgb_spec, rng):
    ckpt = checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0)
    name = first_conv_weight_name(ckpt.spec)
    k = rng.normal(size=ckpt.weights[name].shape[:1] + ckpt.weights[name].shape[2:]).astype(np.float32)
    ckpt.weights[name] = np.ascontiguousarray(np.stack([k, k, k], axis=1))
    extended = extend_input_channels(ckpt, RGBN)
    assert extended.bands == RGBN
    assert extended.spec.in_channels == 4
    np.testing.assert_array_equal(extended.weights[name][:, 3], k)


def test_extend_touches_only_first_conv(rgb_spec):
    ckpt = checkpoint_from_model(build_model(rgb_spec, seed=3), RGB, 3)
    extended = extend_input_channels(ckpt, SIX)
    name = first_conv_weight_name(ckpt.spec)
    assert list(extended.weights) == list(ckpt.weights)
    for key, value in ckpt.weights.items():
        if key == name:
            assert extended.weights[key].shape[1] == 6
            np.testing.assert_array_equal(extended.weights[key][:, :3], value)
        else:
            assert extended.weights[key].dtype == value.dtype
            assert np.array_equal(extended.weights[key], value)


def test_extend_init_strategies(rgb_spec):
    ckpt = checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0)
    name = first_conv_weight_name(ckpt.spec)
    kernel = ckpt.weights[name]
    zeros = extend_input_channels(ckpt, RGBN, init="zeros")
    assert not zeros.weights[name][:, 3].any()
    nearest = extend_input_channels(ckpt, RGBN, init="nearest")
    # NIR is spectrally closest to RED
    np.testing.assert_array_equal(nearest.weights[name][:, 3], kernel[:, 2])
    with pytest.raises(InvalidConfig):
        extend_input_channels(ckpt, RGBN, init="random")


def test_extend_errors(rgb_spec):
    ckpt = checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0)
    with pytest.raises(BandSubsetViolation):
        extend_input_channels(ckpt, [BandId.RED, BandId.NIR])
    name = first_conv_weight_name(ckpt.spec)
    ckpt.weights[name] = ckpt.weights[name][:, :2].copy()
    with pytest.raises(ShapeMismatch):
        extend_input_channels(ckpt, RGBN)
    del ckpt.weights[name]
    with pytest.raises(MissingWeight):
        extend_input_channels(ckpt, RGBN)


def test_extended_model_matches_original_on_zero_planes(small_head):
    """Zero-filled new bands reproduce the original logits, across random checkpoints and inputs."""
    rng = np.random.default_rng(99)
    spec = ModelSpec(in_channels=3, head=small_head)
    for trial in range(20):
        model = build_model(spec, seed=trial)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        ckpt = checkpoint_from_model(model, RGB, trial)
        extended = extend_input_channels(ckpt, SIX, init="mean")
        original = model_from_checkpoint(ckpt).double()
        widened = model_from_checkpoint(extended).double()
        x = rng.random((2, 32, 32, 3))
        padded = np.concatenate([x, np.zeros((2, 32, 32, 3))], axis=-1)
        np.testing.assert_allclose(_eval_logits(widened, padded), _eval_logits(original, x), rtol=0, atol=1e-5)


def _rewrite_metadata(raw, edit):
    header = struct.Struct("<4sHQ")
    magic, version, meta_len = header.unpack_from(raw, 0)
    metadata = json.loads(raw[header.size:header.size + meta_len])
    edit(metadata)
    encoded = json.dumps(metadata).encode("utf-8")
    return header.pack(magic, version, len(encoded)) + encoded + raw[header.size + meta_len:]


@pytest.mark.parametrize("edit", [
    lambda m: m.pop("seed"),
    lambda m: m.pop("spec"),
    lambda m: m.pop("tensors"),
    lambda m: m["tensors"][0].pop("dtype"),
    lambda m: m.update(bands=["RED", "ULTRAVIOLET"]),
    lambda m: m.update(seed="abc"),
])
def test_incomplete_checkpoint_metadata_is_corrupt(tmp_path, rgb_spec, edit):
    path = save_checkpoint(checkpoint_from_model(build_model(rgb_spec, seed=0), RGB, 0), tmp_path / "m.ckpt")
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(_rewrite_metadata(path.read_bytes(), edit))
    with pytest.raises(CorruptFile):
        load_checkpoint(broken)
