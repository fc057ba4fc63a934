"""
Fully-convolutional segmentation model, checkpoints and input-channel extension.

Checkpoint container (``.ckpt``), little-endian::

    magic          4s   b"PSCK"
    version        u2
    metadata_len   u8
    metadata       utf-8 JSON: spec, bands, stage_history, seed and a tensor table
                   [{name, dtype, shape, offset, nbytes}, ...]
    payload        tensors concatenated in table order (row-major)
"""

import enum
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision
from torch import nn
from torchvision.models.resnet import BasicBlock, conv1x1

from ..core import config
from ..core.errors import (
    BandSubsetViolation,
    ChannelMismatch,
    CorruptFile,
    InvalidConfig,
    IoError,
    MissingWeight,
    NonDivisibleSize,
    ProgSegError,
    ShapeMismatch,
    SpecMismatch,
    UnsupportedBackbone,
)
from ..core.fileio import write_bytes_atomic
from .raster_manager import BandId, canonical_order

logger = logging.getLogger(__name__)

_CKPT_HEADER = struct.Struct("<4sHQ")
_PAYLOAD_DTYPES = {"float32": "<f4", "int64": "<i8"}


class Backbone(str, enum.Enum):
    SMALL_RESNET = "SMALL_RESNET"
    UNET_ENCODER = "UNET_ENCODER"
    CUSTOM = "CUSTOM"


@dataclass(frozen=True)
class HeadSpec:
    upsample_channels: int = config.DEFAULT_HEAD_UPSAMPLE_CHANNELS
    # widths of the first two blocks; the third always emits n_classes
    block_channels: tuple = config.DEFAULT_HEAD_BLOCK_CHANNELS
    dropout_rate: float = config.DEFAULT_HEAD_DROPOUT

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if len(self.block_channels) != 2 or min(self.block_channels) < 1:
            raise InvalidConfig(f"Head needs two positive block widths, got {self.block_channels}")
        if self.upsample_channels < 1:
            raise InvalidConfig(f"upsample_channels must be positive, got {self.upsample_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    n_classes: int = config.N_CLASSES
    backbone: Backbone = Backbone.SMALL_RESNET
    head: HeadSpec = field(default_factory=HeadSpec)
    fully_convolutional: bool = True
    # registry name used when backbone is CUSTOM
    custom_backbone: Optional[str] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "backbone", Backbone(self.backbone))
        except ValueError as e:
            raise UnsupportedBackbone(f"Unknown backbone '{self.backbone}'", backbone=self.backbone) from e
        if isinstance(self.head, dict):
            object.__setattr__(self, "head", HeadSpec(**self.head))
        if not self.fully_convolutional:
            raise InvalidConfig("Only fully-convolutional models can carry weights across patch sizes")
        if self.in_channels < 1:
            raise InvalidConfig(f"in_channels must be >= 1, got {self.in_channels}")
        if self.n_classes < 2:
            raise InvalidConfig(f"n_classes must be >= 2, got {self.n_classes}")
        if self.backbone == Backbone.CUSTOM and not self.custom_backbone:
            raise InvalidConfig("CUSTOM backbone requires custom_backbone")

    @property
    def backbone_key(self) -> str:
        return self.custom_backbone if self.backbone == Backbone.CUSTOM else self.backbone.value

    def to_dict(self) -> dict:
        data = asdict(self)
        data["backbone"] = self.backbone.value
        data["head"]["block_channels"] = list(self.head.block_channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = dict(data)
        data["head"] = HeadSpec(**data.get("head", {}))
        return cls(**data)


# --- Backbones ---

class SmallResNet(nn.Module):
    """Stride-1 stem plus four stride-2 residual stages (16x total downsampling)."""

    first_conv = "stem.0"
    downsampling = 16

    def __init__(self, in_channels: int, widths: Sequence[int] = config.SMALL_RESNET_WIDTHS):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], kernel_size=3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        prev = widths[0]
        for width in widths:
            downsample = nn.Sequential(conv1x1(prev, width, stride=2), nn.BatchNorm2d(width))
            stages.append(BasicBlock(prev, width, stride=2, downsample=downsample))
            prev = width
        self.stages = nn.ModuleList(stages)
        self.out_channels = prev

    def depth_groups(self) -> list:
        return [[self.stem, self.stages[0]], [self.stages[1]], [self.stages[2]], [self.stages[3]]]

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


def _double_conv(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class UNetEncoder(nn.Module):
    """Contracting half of a U-Net: double convs separated by 2x max-pooling."""

    first_conv = "levels.0.0"
    downsampling = 8

    def __init__(self, in_channels: int, widths: Sequence[int] = config.SMALL_RESNET_WIDTHS):
        super().__init__()
        levels = [_double_conv(in_channels, widths[0])]
        for prev, width in zip(widths[:-1], widths[1:]):
            levels.append(nn.Sequential(nn.MaxPool2d(2), _double_conv(prev, width)))
        self.levels = nn.ModuleList(levels)
        self.out_channels = widths[-1]

    def depth_groups(self) -> list:
        return [[level] for level in self.levels]

    def forward(self, x):
        for level in self.levels:
            x = level(x)
        return x


class TorchvisionResNet(nn.Module):
    """Untrained torchvision ResNet trunk (classifier removed) with a C-channel stem."""

    first_conv = "conv1"
    downsampling = 32

    def __init__(self, in_channels: int, arch: str = "resnet50"):
        super().__init__()
        net = getattr(torchvision.models, arch)(weights=None)
        self.conv1 = nn.Conv2d(in_channels, net.conv1.out_channels, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = net.bn1
        self.relu = net.relu
        self.maxpool = net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.out_channels = net.fc.in_features

    def depth_groups(self) -> list:
        return [[self.conv1, self.bn1, self.layer1], [self.layer2], [self.layer3], [self.layer4]]

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


@dataclass(frozen=True)
class BackboneEntry:
    factory: Callable
    first_conv: str


BACKBONES = {
    Backbone.SMALL_RESNET.value: BackboneEntry(SmallResNet, SmallResNet.first_conv),
    Backbone.UNET_ENCODER.value: BackboneEntry(UNetEncoder, UNetEncoder.first_conv),
    "resnet18": BackboneEntry(lambda c: TorchvisionResNet(c, "resnet18"), TorchvisionResNet.first_conv),
    "resnet50": BackboneEntry(lambda c: TorchvisionResNet(c, "resnet50"), TorchvisionResNet.first_conv),
}


def register_backbone(name: str, factory: Callable, first_conv: str):
    """Makes `name` available as a CUSTOM backbone. `factory(in_channels)` must return a module
    exposing out_channels, downsampling and depth_groups()."""
    BACKBONES[name] = BackboneEntry(factory, first_conv)


def _backbone_entry(spec: ModelSpec) -> BackboneEntry:
    entry = BACKBONES.get(spec.backbone_key)
    if entry is None:
        raise UnsupportedBackbone(f"No backbone registered as '{spec.backbone_key}'", backbone=spec.backbone_key)
    return entry


def first_conv_weight_name(spec: ModelSpec) -> str:
    return f"backbone.{_backbone_entry(spec).first_conv}.weight"


# --- Model ---

class SegmentationHead(nn.Module):
    """Stride-1 conv, bilinear resize to input size, three conv/BN/dropout/ReLU blocks, final BN."""

    def __init__(self, in_channels: int, n_classes: int, spec: HeadSpec):
        super().__init__()
        self.upsample_conv = nn.Conv2d(in_channels, spec.upsample_channels, kernel_size=3, stride=1, padding=1)
        widths = [spec.upsample_channels, *spec.block_channels, n_classes]
        self.blocks = nn.Sequential(*[
            nn.Sequential(
                nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
                nn.BatchNorm2d(c_out),
                nn.Dropout(spec.dropout_rate),
                nn.ReLU(inplace=True),
            )
            for c_in, c_out in zip(widths[:-1], widths[1:])
        ])
        self.final_norm = nn.BatchNorm2d(n_classes)

    def forward(self, features, size):
        x = self.upsample_conv(features)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.final_norm(self.blocks(x))


class SegmentationModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.backbone = _backbone_entry(spec).factory(spec.in_channels)
        self.head = SegmentationHead(self.backbone.out_channels, spec.n_classes, spec.head)
        # (patch_size, epochs) per completed stage
        self.stage_history = []

    @property
    def downsampling(self) -> int:
        return self.backbone.downsampling

    def parameter_groups(self) -> list:
        """Backbone depth groups (earliest first) followed by the head, as parameter lists."""
        groups = [[p for module in group for p in module.parameters()] for group in self.backbone.depth_groups()]
        groups.append(list(self.head.parameters()))
        return groups

    def forward(self, x):
        return self.head(self.backbone(x), x.shape[-2:])


def build_model(spec: ModelSpec, seed: int) -> SegmentationModel:
    _backbone_entry(spec)
    torch.manual_seed(seed)
    model = SegmentationModel(spec)
    logger.debug(f"Built {spec.backbone_key} model ({spec.in_channels} -> {spec.n_classes} classes), seed {seed}")
    return model


def forward(model: SegmentationModel, batch) -> torch.Tensor:
    """Runs B x S x S x C input (ndarray or tensor) and returns B x S x S x n_classes logits."""
    x = torch.as_tensor(batch)
    if not torch.is_floating_point(x):
        x = x.float()
    if x.ndim != 4:
        raise ShapeMismatch(f"Expected a B x S x S x C batch, got shape {tuple(x.shape)}")
    if x.shape[-1] != model.spec.in_channels:
        raise ChannelMismatch(
            f"Batch has {x.shape[-1]} channels, model expects {model.spec.in_channels}",
            got=int(x.shape[-1]), expected=model.spec.in_channels,
        )
    factor = model.downsampling
    if x.shape[1] % factor or x.shape[2] % factor:
        raise NonDivisibleSize(
            f"Spatial size {tuple(x.shape[1:3])} not divisible by {factor}",
            shape=tuple(x.shape[1:3]), factor=factor,
        )
    param = next(model.parameters())
    x = x.to(device=param.device, dtype=param.dtype)
    logits = model(x.permute(0, 3, 1, 2).contiguous())
    return logits.permute(0, 2, 3, 1)


# --- Checkpoints ---

@dataclass(eq=False)
class ModelCheckpoint:
    weights: dict
    spec: ModelSpec
    bands: list
    stage_history: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.bands = canonical_order(self.bands)
        self.stage_history = [(int(s), int(e)) for s, e in self.stage_history]
        if len(self.bands) != self.spec.in_channels:
            raise ChannelMismatch(
                f"Checkpoint lists {len(self.bands)} bands for a {self.spec.in_channels}-channel model"
            )

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        if (self.spec, self.bands, self.stage_history, self.seed) != (
                other.spec, other.bands, other.stage_history, other.seed):
            return False
        if list(self.weights) != list(other.weights):
            return False
        return all(
            self.weights[k].dtype == other.weights[k].dtype and np.array_equal(self.weights[k], other.weights[k])
            for k in self.weights
        )


def checkpoint_from_model(model: SegmentationModel, bands: Sequence[BandId], seed: int) -> ModelCheckpoint:
    weights = {name: t.detach().cpu().numpy().copy() for name, t in model.state_dict().items()}
    return ModelCheckpoint(
        weights=weights,
        spec=model.spec,
        bands=list(bands),
        stage_history=list(model.stage_history),
        seed=seed,
    )


def transfer_weights(model: SegmentationModel, ckpt: ModelCheckpoint) -> SegmentationModel:
    """Loads every checkpoint tensor into `model`; specs must agree."""
    if model.spec != ckpt.spec:
        raise SpecMismatch(
            f"Checkpoint spec {ckpt.spec} does not match model spec {model.spec}",
            model_channels=model.spec.in_channels, ckpt_channels=ckpt.spec.in_channels,
        )
    state = model.state_dict()
    missing = [name for name in state if name not in ckpt.weights]
    if missing:
        raise MissingWeight(f"Checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}", missing=missing)
    unexpected = [name for name in ckpt.weights if name not in state]
    if unexpected:
        raise SpecMismatch(f"Checkpoint carries unknown tensors, e.g. {unexpected[0]}", unexpected=unexpected)
    for name, target in state.items():
        if tuple(target.shape) != tuple(ckpt.weights[name].shape):
            raise SpecMismatch(
                f"Tensor {name}: checkpoint {ckpt.weights[name].shape} vs model {tuple(target.shape)}", name=name
            )
    model.load_state_dict({name: torch.from_numpy(np.array(ckpt.weights[name])) for name in state}, strict=True)
    model.stage_history = list(ckpt.stage_history)
    return model


def model_from_checkpoint(ckpt: ModelCheckpoint) -> SegmentationModel:
    return transfer_weights(build_model(ckpt.spec, ckpt.seed), ckpt)


def _nearest_band(band: BandId, candidates: Sequence[BandId]) -> BandId:
    wavelength = config.BAND_WAVELENGTH_NM
    return min(candidates, key=lambda c: (abs(wavelength[c.name] - wavelength[band.name]), int(c)))


def extend_input_channels(ckpt: ModelCheckpoint, new_bands: Sequence[BandId], init: str = "mean") -> ModelCheckpoint:
    """
    Widens the first convolution to accept `new_bands` (a superset of ckpt.bands).

    Kernels of existing bands are copied unchanged. New-band kernels are the mean of the
    existing kernels ("mean"), a copy of the spectrally nearest existing band ("nearest"),
    or zero ("zeros"). Every other tensor is carried over as is.
    """
    if init not in config.EXTEND_INIT_STRATEGIES:
        raise InvalidConfig(f"Unknown extension init '{init}', expected one of {config.EXTEND_INIT_STRATEGIES}")
    new_bands = canonical_order(new_bands)
    if len(set(new_bands)) != len(new_bands):
        raise BandSubsetViolation("Duplicate bands in extension target")
    dropped = [b.name for b in ckpt.bands if b not in new_bands]
    if dropped:
        raise BandSubsetViolation(f"Extension would drop existing bands {dropped}", dropped=dropped)

    name = first_conv_weight_name(ckpt.spec)
    if name not in ckpt.weights:
        raise MissingWeight(f"Checkpoint has no first-convolution tensor {name}", missing=[name])
    kernel = ckpt.weights[name]
    if kernel.ndim != 4 or kernel.shape[1] != len(ckpt.bands):
        raise ShapeMismatch(
            f"First convolution {name} has shape {kernel.shape}, expected {len(ckpt.bands)} input channels",
            shape=kernel.shape,
        )

    mean_kernel = kernel.astype(np.float64).mean(axis=1).astype(kernel.dtype)
    planes = []
    for band in new_bands:
        if band in ckpt.bands:
            planes.append(kernel[:, ckpt.bands.index(band)])
        elif init == "mean":
            planes.append(mean_kernel)
        elif init == "nearest":
            planes.append(kernel[:, ckpt.bands.index(_nearest_band(band, ckpt.bands))])
        else:
            planes.append(np.zeros_like(kernel[:, 0]))
    extended = np.ascontiguousarray(np.stack(planes, axis=1))

    weights = {k: (extended if k == name else v.copy()) for k, v in ckpt.weights.items()}
    added = [b.name for b in new_bands if b not in ckpt.bands]
    if added:
        logger.info(f"Extended {name} from {len(ckpt.bands)} to {len(new_bands)} channels "
                    f"(added {added}, init={init})")
    return ModelCheckpoint(
        weights=weights,
        spec=replace(ckpt.spec, in_channels=len(new_bands)),
        bands=new_bands,
        stage_history=list(ckpt.stage_history),
        seed=ckpt.seed,
    )


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    table = []
    payloads = []
    offset = 0
    for name, array in ckpt.weights.items():
        array = np.asarray(array)
        dtype = array.dtype.name
        if dtype not in _PAYLOAD_DTYPES:
            raise InvalidConfig(f"Tensor {name} has unsupported dtype {dtype}")
        blob = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPES[dtype]).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    metadata = json.dumps({
        "spec": ckpt.spec.to_dict(),
        "bands": [b.name for b in ckpt.bands],
        "stage_history": [list(s) for s in ckpt.stage_history],
        "seed": ckpt.seed,
        "tensors": table,
    }, sort_keys=True).encode("utf-8")
    header = _CKPT_HEADER.pack(config.CHECKPOINT_MAGIC, config.CHECKPOINT_VERSION, len(metadata))
    write_bytes_atomic(path, [header, metadata, *payloads])
    logger.info(f"Saved checkpoint ({len(table)} tensors, bands {[b.name for b in ckpt.bands]}) to {path}")
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read checkpoint {path}: {e}", path=path) from e
    if len(raw) < _CKPT_HEADER.size:
        raise CorruptFile(f"{path} is too short to be a checkpoint", path=path)
    magic, version, meta_len = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != config.CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path} has bad magic {magic!r}", path=path)
    if version != config.CHECKPOINT_VERSION:
        raise CorruptFile(f"{path} has unsupported checkpoint version {version}", path=path)
    start = _CKPT_HEADER.size
    try:
        metadata = json.loads(raw[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path} has unreadable metadata: {e}", path=path) from e
    payload = memoryview(raw)[start + meta_len:]
    try:
        weights = {}
        for entry in metadata["tensors"]:
            end = entry["offset"] + entry["nbytes"]
            if end > len(payload):
                raise CorruptFile(f"{path} is truncated inside tensor {entry['name']}", path=path)
            array = np.frombuffer(payload[entry["offset"]:end], dtype=_PAYLOAD_DTYPES[entry["dtype"]])
            weights[entry["name"]] = array.astype(entry["dtype"]).reshape(entry["shape"])
        return ModelCheckpoint(
            weights=weights,
            spec=ModelSpec.from_dict(metadata["spec"]),
            bands=[BandId[name] for name in metadata["bands"]],
            stage_history=[tuple(s) for s in metadata["stage_history"]],
            seed=int(metadata["seed"]),
        )
    except ProgSegError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(f"{path} has incomplete checkpoint metadata: {e!r}", path=path) from e
