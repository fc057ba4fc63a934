"""
Progressive patch-size training.

Each stage trains the same fully-convolutional weights on one patch size in two phases:
head-only with the backbone frozen, then the whole network with depth-graded learning
rates. The best validation-mIoU weights of a stage seed the next, larger stage.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy import ndimage
from torch.utils.data import DataLoader, Dataset

from ..core import config
from ..core.errors import (
    ChannelMismatch,
    EmptyDataset,
    IndivisibleDimensions,
    InvalidConfig,
    MissingPatchSet,
    SizeMismatch,
)
from ..core.fileio import write_text_atomic
from . import model_manager
from .loss_manager import (
    ConfusionCounts,
    LossWeights,
    confusion_counts,
    hybrid_loss,
    metrics_report,
    one_hot,
    predictions_from_logits,
)
from .model_manager import (
    ModelCheckpoint,
    ModelSpec,
    SegmentationModel,
    build_model,
    checkpoint_from_model,
    extend_input_channels,
    save_checkpoint,
    transfer_weights,
)
from .patch_manager import Patch, PatchSet, Split, load_patch_set, patch_dir
from .raster_manager import LabelClass, LabelMask, MultispectralImage, canonical_order

logger = logging.getLogger(__name__)


# --- Plans ---

@dataclass(frozen=True)
class StageConfig:
    patch_size: int
    frozen_epochs: int = config.DEFAULT_FROZEN_EPOCHS
    finetune_epochs: int = config.DEFAULT_FINETUNE_EPOCHS
    lr_head: float = config.DEFAULT_LR_HEAD
    lr_base: float = config.DEFAULT_LR_BASE
    batch_size: int = config.DEFAULT_BATCH_SIZE
    early_stop_patience: int = config.DEFAULT_EARLY_STOP_PATIENCE

    def __post_init__(self):
        if self.patch_size not in config.PATCH_SIZES:
            raise InvalidConfig(f"patch_size {self.patch_size} not in {config.PATCH_SIZES}")
        if self.frozen_epochs < 0 or self.finetune_epochs < 0:
            raise InvalidConfig("Epoch counts must be non-negative")
        if self.frozen_epochs + self.finetune_epochs < 1:
            raise InvalidConfig(f"Stage {self.patch_size} has no epochs to run")
        if not 0 < self.lr_base <= self.lr_head:
            raise InvalidConfig(f"Need 0 < lr_base <= lr_head, got {self.lr_base} / {self.lr_head}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise InvalidConfig(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")

    @property
    def total_epochs(self) -> int:
        return self.frozen_epochs + self.finetune_epochs


@dataclass(frozen=True)
class StagePlan:
    stages: tuple

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise InvalidConfig("Stage plan is empty")
        sizes = [s.patch_size for s in stages]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise InvalidConfig(f"Patch sizes must strictly increase, got {sizes}")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], **stage_options) -> "StagePlan":
        return cls(tuple(StageConfig(patch_size=int(s), **stage_options) for s in sizes))

    @property
    def sizes(self) -> list:
        return [s.patch_size for s in self.stages]

    @property
    def total_epochs(self) -> int:
        return sum(s.total_epochs for s in self.stages)


def individual_baseline(plan: StagePlan) -> StagePlan:
    """Single stage at the plan's largest size with the plan's total epoch budget."""
    last = plan.stages[-1]
    return StagePlan((replace(last, finetune_epochs=plan.total_epochs - last.frozen_epochs),))


def group_learning_rates(cfg: StageConfig, n_groups: int = config.BACKBONE_LR_GROUPS) -> list:
    """Geometric ramp from lr_base (earliest backbone group) towards lr_head; the head gets lr_head."""
    ratio = cfg.lr_head / cfg.lr_base
    return [cfg.lr_base * ratio ** (k / n_groups) for k in range(n_groups)] + [cfg.lr_head]


# --- Augmentation ---

@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = True
    vflip: bool = True
    rotation: tuple = config.DEFAULT_ROTATION_DEG
    zoom: tuple = config.DEFAULT_ZOOM
    brightness: float = config.DEFAULT_BRIGHTNESS
    contrast: float = config.DEFAULT_CONTRAST
    translation: float = config.DEFAULT_TRANSLATION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "zoom", tuple(float(v) for v in self.zoom))
        if len(self.rotation) != 2 or self.rotation[0] > self.rotation[1]:
            raise InvalidConfig(f"rotation must be an ordered (min, max) pair, got {self.rotation}")
        if len(self.zoom) != 2 or not 0 < self.zoom[0] <= self.zoom[1]:
            raise InvalidConfig(f"zoom must be an ordered positive pair, got {self.zoom}")
        for name in ("brightness", "contrast", "translation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidConfig(f"{name} must be in [0, 1), got {getattr(self, name)}")

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls(hflip=False, vflip=False, rotation=(0.0, 0.0), zoom=(1.0, 1.0),
                   brightness=0.0, contrast=0.0, translation=0.0)


@dataclass(frozen=True)
class AugmentDraw:
    """One sampled transform. Geometry: output = flip(affine(input)); rotation in degrees."""
    hflip: bool = False
    vflip: bool = False
    rotation_deg: float = 0.0
    zoom: float = 1.0
    shift: tuple = (0.0, 0.0)
    brightness: float = 0.0
    contrast: float = 0.0

    @property
    def is_affine_identity(self) -> bool:
        return self.rotation_deg == 0.0 and self.zoom == 1.0 and tuple(self.shift) == (0.0, 0.0)


def draw_augmentation(params: AugmentParams, rng: np.random.Generator, size: int) -> AugmentDraw:
    hflip = bool(params.hflip and rng.random() < 0.5)
    vflip = bool(params.vflip and rng.random() < 0.5)
    rotation = float(rng.uniform(*params.rotation)) if params.rotation[0] != params.rotation[1] else params.rotation[0]
    zoom = float(rng.uniform(*params.zoom)) if params.zoom[0] != params.zoom[1] else params.zoom[0]
    max_shift = params.translation * size
    shift = (float(rng.uniform(-max_shift, max_shift)), float(rng.uniform(-max_shift, max_shift))) \
        if max_shift > 0 else (0.0, 0.0)
    brightness = float(rng.uniform(-params.brightness, params.brightness)) if params.brightness else 0.0
    contrast = float(rng.uniform(-params.contrast, params.contrast)) if params.contrast else 0.0
    return AugmentDraw(hflip, vflip, rotation, zoom, shift, brightness, contrast)


def geometric_map(draw: AugmentDraw, size: int) -> np.ndarray:
    """Pre-image (row, col) coordinates of every output pixel, shape (2, size, size)."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    if draw.vflip:
        rows = size - 1 - rows
    if draw.hflip:
        cols = size - 1 - cols
    centre = (size - 1) / 2.0
    theta = math.radians(draw.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    dy = rows - centre - draw.shift[0]
    dx = cols - centre - draw.shift[1]
    # inverse of q = R(theta) * zoom * (p - centre) + centre + shift
    src_rows = (cos_t * dy + sin_t * dx) / draw.zoom + centre
    src_cols = (-sin_t * dy + cos_t * dx) / draw.zoom + centre
    return np.stack([src_rows, src_cols])


def apply_augmentation(patch: Patch, draw: AugmentDraw) -> Patch:
    """Geometric part on image (bilinear, reflect padding) and mask (nearest, OTHER fill); photometric on image."""
    data = patch.image.data
    labels = patch.mask.data
    size = patch.size
    if draw.is_affine_identity:
        if draw.vflip:
            data, labels = data[::-1], labels[::-1]
        if draw.hflip:
            data, labels = data[:, ::-1], labels[:, ::-1]
        data = np.ascontiguousarray(data)
        labels = np.ascontiguousarray(labels)
    else:
        coords = geometric_map(draw, size)
        data = np.stack([
            ndimage.map_coordinates(data[..., i], coords, order=1, mode="reflect")
            for i in range(data.shape[-1])
        ], axis=-1).astype(np.float32)
        idx = np.floor(coords + 0.5).astype(np.int64)
        inside = (idx >= 0).all(axis=0) & (idx < size).all(axis=0)
        idx = np.clip(idx, 0, size - 1)
        labels = np.where(inside, labels[idx[0], idx[1]], LabelClass.OTHER).astype(np.uint8)

    if draw.brightness or draw.contrast:
        data = data * np.float32(1.0 + draw.brightness)
        if draw.contrast:
            mean = data.mean(axis=(0, 1), keepdims=True)
            data = (data - mean) * np.float32(1.0 + draw.contrast) + mean
        data = np.clip(data, 0.0, 1.0).astype(np.float32)

    return Patch(image=patch.image.replace(data), mask=LabelMask(labels), origin=patch.origin, size=size)


def augment(patch: Patch, params: AugmentParams, rng: np.random.Generator) -> Patch:
    return apply_augmentation(patch, draw_augmentation(params, rng, patch.size))


class PatchDataset(Dataset):
    """Patches as (S x S x C float32, S x S int64) tensors; augmentation seeded by (seed, epoch, index)."""

    def __init__(self, patch_set: PatchSet, augment_params: Optional[AugmentParams] = None, seed: int = 0):
        self.patches = patch_set.patches
        self.augment_params = augment_params
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, index):
        patch = self.patches[index]
        if self.augment_params is not None:
            rng = np.random.default_rng([self.seed, self.augment_params.seed, self.epoch, index])
            patch = augment(patch, self.augment_params, rng)
        return torch.from_numpy(patch.image.data), torch.from_numpy(patch.mask.data.astype(np.int64))


# --- History ---

@dataclass
class EpochRecord:
    stage: int
    patch_size: int
    phase: str
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    val_f1: float
    wall_time_s: float = 0.0

    def comparable(self) -> tuple:
        return (self.stage, self.patch_size, self.phase, self.epoch,
                self.train_loss, self.val_loss, self.val_miou, self.val_f1)


@dataclass
class TrainHistory:
    stage: int
    patch_size: int
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_miou: float = float("-inf")
    best_val_f1: float = 0.0
    early_stopped: bool = False

    def comparable(self) -> tuple:
        """Everything except wall time."""
        return (self.stage, self.patch_size, tuple(r.comparable() for r in self.records),
                self.best_epoch, self.best_val_miou, self.best_val_f1, self.early_stopped)

    def to_frame(self) -> pd.DataFrame:
        columns = [f.name for f in EpochRecord.__dataclass_fields__.values()]
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)

    def summary(self) -> dict:
        return {
            "stage": self.stage,
            "patch_size": self.patch_size,
            "epochs": len(self.records),
            "best_epoch": self.best_epoch,
            "best_val_miou": self.best_val_miou,
            "best_val_f1": self.best_val_f1,
            "early_stopped": self.early_stopped,
        }


def histories_frame(histories: Sequence[TrainHistory]) -> pd.DataFrame:
    frames = [h.to_frame() for h in histories]
    return pd.concat(frames, ignore_index=True) if frames else TrainHistory(0, 0).to_frame()


def save_history_csv(histories: Sequence[TrainHistory], path) -> Path:
    path = Path(path)
    write_text_atomic(path, histories_frame(histories).to_csv(index=False))
    logger.info(f"Wrote training history ({sum(len(h.records) for h in histories)} epochs) to {path}")
    return path


# --- Evaluation ---

def _check_channels(model: SegmentationModel, n_bands: int):
    if n_bands != model.spec.in_channels:
        raise ChannelMismatch(
            f"Data has {n_bands} bands, model expects {model.spec.in_channels}",
            got=n_bands, expected=model.spec.in_channels,
        )


def _batches(items: Sequence, batch_size: int):
    for start in range(0, len(items), batch_size):
        yield items[start:start + batch_size]


def _evaluate_counts(model, patch_set: PatchSet, batch_size: int, loss_weights: Optional[LossWeights]):
    """Confusion counts (and mean loss when weights are given) over a whole patch set, in eval mode."""
    was_training = model.training
    model.eval()
    counts = ConfusionCounts.zeros(model.spec.n_classes)
    loss_sum = 0.0
    try:
        with torch.no_grad():
            for chunk in _batches(patch_set.patches, batch_size):
                x = np.stack([p.image.data for p in chunk])
                y = np.stack([p.mask.data for p in chunk])
                logits = model_manager.forward(model, x)
                counts = counts + confusion_counts(predictions_from_logits(logits), y, model.spec.n_classes)
                if loss_weights is not None:
                    target = one_hot(y, model.spec.n_classes, dtype=logits.dtype)
                    loss_sum += float(hybrid_loss(torch.sigmoid(logits), target, loss_weights)) * len(chunk)
    finally:
        model.train(was_training)
    return counts, loss_sum / max(1, len(patch_set))


def evaluate(model, val: PatchSet, batch_size: int = config.DEFAULT_BATCH_SIZE) -> dict:
    """Metrics over the pooled confusion counts of every patch (not an average of per-patch scores)."""
    _check_channels(model, len(val.band_set))
    if len(val) == 0:
        raise EmptyDataset("Nothing to evaluate")
    counts, _ = _evaluate_counts(model, val, batch_size, None)
    report = metrics_report(counts)
    report["n_patches"] = len(val)
    report["patch_size"] = val.size
    return report


def predict_map(model, img: MultispectralImage, tile_size: int,
                batch_size: int = config.DEFAULT_BATCH_SIZE) -> LabelMask:
    """Tiles `img`, classifies every tile and stitches the argmax labels back together."""
    _check_channels(model, img.n_bands)
    height, width, channels = img.data.shape
    if tile_size < 1 or height % tile_size or width % tile_size:
        raise IndivisibleDimensions(
            f"{height}x{width} is not divisible by tile size {tile_size}",
            shape=(height, width), size=tile_size,
        )
    n_rows, n_cols = height // tile_size, width // tile_size
    tiles = (img.data.reshape(n_rows, tile_size, n_cols, tile_size, channels)
             .transpose(0, 2, 1, 3, 4)
             .reshape(-1, tile_size, tile_size, channels))
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad():
            for chunk in _batches(tiles, batch_size):
                preds.append(predictions_from_logits(model_manager.forward(model, np.ascontiguousarray(chunk))))
    finally:
        model.train(was_training)
    labels = (np.concatenate(preds)
              .reshape(n_rows, n_cols, tile_size, tile_size)
              .transpose(0, 2, 1, 3)
              .reshape(height, width))
    return LabelMask(labels)


# --- Training ---

def _stage_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint32)[0])


def _run_epoch(model, dataset: PatchDataset, cfg: StageConfig, optimizer, loss_weights: LossWeights,
               seed: int, epoch: int, workers: int) -> float:
    dataset.set_epoch(epoch)
    generator = torch.Generator().manual_seed(_stage_seed(seed, epoch))
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator,
                        num_workers=workers)
    total = 0.0
    for x, y in loader:
        optimizer.zero_grad()
        logits = model_manager.forward(model, x)
        target = one_hot(y, model.spec.n_classes, dtype=logits.dtype)
        loss = hybrid_loss(torch.sigmoid(logits), target, loss_weights)
        loss.backward()
        optimizer.step()
        total += float(loss.detach()) * x.shape[0]
        logger.debug(f"batch loss {float(loss):.5f}")
    return total / len(dataset)


def _best_state(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train_stage(model: SegmentationModel, train: PatchSet, val: PatchSet, cfg: StageConfig,
                loss_weights: LossWeights = LossWeights(), seed: int = 0,
                augment_params: Optional[AugmentParams] = AugmentParams(), stage: int = 0,
                workers: int = 0):
    """
    Phase 1: backbone frozen (no gradients, BN statistics fixed), Adam on the head at lr_head.
    Phase 2: everything trainable, Adam with depth-graded learning rates, early stopping on val mIoU.
    Returns (model holding the best val-mIoU weights, TrainHistory).
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptyDataset(f"Stage {cfg.patch_size}: {len(train)} train / {len(val)} val patches")
    for name, patch_set in (("train", train), ("val", val)):
        if patch_set.size != cfg.patch_size:
            raise SizeMismatch(
                f"{name} patches are {patch_set.size}, stage expects {cfg.patch_size}",
                got=patch_set.size, expected=cfg.patch_size,
            )
    _check_channels(model, len(train.band_set))
    _check_channels(model, len(val.band_set))

    torch.manual_seed(seed)
    dataset = PatchDataset(train, augment_params, seed)
    history = TrainHistory(stage=stage, patch_size=cfg.patch_size)
    best_state = None
    epoch = 0

    def _finish_epoch(phase: str, train_loss: float, started: float) -> bool:
        nonlocal best_state
        counts, val_loss = _evaluate_counts(model, val, cfg.batch_size, loss_weights)
        report = metrics_report(counts)
        record = EpochRecord(stage, cfg.patch_size, phase, epoch, train_loss, val_loss,
                             report["miou"], report["f1"], time.perf_counter() - started)
        history.records.append(record)
        improved = record.val_miou > history.best_val_miou
        if improved:
            history.best_val_miou, history.best_val_f1, history.best_epoch = record.val_miou, record.val_f1, epoch
            best_state = _best_state(model)
        logger.info(f"[{cfg.patch_size}px {phase} {epoch}] train {train_loss:.4f} val {val_loss:.4f} "
                    f"mIoU {record.val_miou:.4f} F1 {record.val_f1:.4f}{' *' if improved else ''}")
        return improved

    # Phase 1: head only
    if cfg.frozen_epochs:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        optimizer = torch.optim.Adam(model.head.parameters(), lr=cfg.lr_head)
        try:
            for _ in range(cfg.frozen_epochs):
                started = time.perf_counter()
                model.train()
                model.backbone.eval()
                loss = _run_epoch(model, dataset, cfg, optimizer, loss_weights, seed, epoch, workers)
                _finish_epoch("frozen", loss, started)
                epoch += 1
        finally:
            for p in model.backbone.parameters():
                p.requires_grad_(True)

    # Phase 2: full network, fresh optimizer state
    if cfg.finetune_epochs:
        lrs = group_learning_rates(cfg)
        groups = [{"params": params, "lr": lr} for params, lr in zip(model.parameter_groups(), lrs)]
        optimizer = torch.optim.Adam(groups)
        stale = 0
        for _ in range(cfg.finetune_epochs):
            started = time.perf_counter()
            model.train()
            loss = _run_epoch(model, dataset, cfg, optimizer, loss_weights, seed, epoch, workers)
            stale = 0 if _finish_epoch("finetune", loss, started) else stale + 1
            epoch += 1
            if stale >= cfg.early_stop_patience:
                history.early_stopped = True
                logger.warning(f"Early stop at {cfg.patch_size}px epoch {epoch - 1}: "
                               f"no val mIoU gain for {stale} epochs")
                break

    model.load_state_dict(best_state)
    model.stage_history.append((cfg.patch_size, len(history.records)))
    logger.info(f"Stage {stage} ({cfg.patch_size}px) done: best mIoU {history.best_val_miou:.4f} "
                f"at epoch {history.best_epoch}")
    return model, history


def _patch_manifest(data_root, size: int) -> Path:
    return patch_dir(data_root, size) / config.PATCH_MANIFEST_NAME


def run_progressive(plan: StagePlan, data_root, bands: Sequence, loss_weights: LossWeights = LossWeights(),
                    seed: int = 0, augment_params: Optional[AugmentParams] = AugmentParams(),
                    model_spec: Optional[ModelSpec] = None, init_checkpoint: Optional[ModelCheckpoint] = None,
                    extend_init: str = "mean", checkpoint_dir=None,
                    on_stage_start: Optional[Callable] = None, workers: int = 0):
    """
    Trains `plan` stage by stage on ``<data_root>/patches_<S>/manifest.jsonl``.

    `init_checkpoint` may cover a subset of `bands` (e.g. an RGB model); it is widened with
    extend_input_channels before the first stage. `on_stage_start(index, stage_cfg, model)` runs
    after the weights for a stage are in place and before its first optimizer step.
    Returns (final checkpoint, [TrainHistory per stage]).
    """
    if not isinstance(plan, StagePlan):
        plan = StagePlan(tuple(plan))
    bands = canonical_order(bands)
    manifests = [_patch_manifest(data_root, s.patch_size) for s in plan.stages]
    missing = [str(m) for m in manifests if not m.is_file()]
    if missing:
        raise MissingPatchSet(f"Missing patch sets: {missing}", missing=missing)

    if init_checkpoint is not None:
        ckpt = init_checkpoint
        if ckpt.bands != bands:
            ckpt = extend_input_channels(ckpt, bands, extend_init)
        model = transfer_weights(build_model(ckpt.spec, seed), ckpt)
    else:
        spec = replace(model_spec, in_channels=len(bands)) if model_spec else ModelSpec(in_channels=len(bands))
        model = build_model(spec, seed)
        ckpt = None

    histories = []
    for index, (stage, manifest) in enumerate(zip(plan.stages, manifests)):
        train = load_patch_set(manifest, Split.TRAIN, bands)
        val = load_patch_set(manifest, Split.VAL, bands)
        if ckpt is not None:
            model = transfer_weights(model, ckpt)
        if on_stage_start is not None:
            on_stage_start(index, stage, model)
        logger.info(f"Stage {index}: {stage.patch_size}px, {len(train)} train / {len(val)} val patches")
        model, history = train_stage(model, train, val, stage, loss_weights, _stage_seed(seed, index),
                                     augment_params, stage=index, workers=workers)
        histories.append(history)
        ckpt = checkpoint_from_model(model, bands, seed)
        if checkpoint_dir is not None:
            save_checkpoint(ckpt, Path(checkpoint_dir) / f"stage_{index}_{stage.patch_size}{config.CHECKPOINT_SUFFIX}")
    return ckpt, histories
