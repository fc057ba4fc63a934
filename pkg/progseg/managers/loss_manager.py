"""
Hybrid BCE + Dice loss on per-class sigmoid probabilities, and confusion-count metrics.

Tensors are channels-last (B x S x S x K) to match model_manager.forward.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..core import config
from ..core.errors import InvalidConfig, NoClassesPresent, OutOfRangeClass, ShapeMismatch
from .raster_manager import LabelMask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = config.DEFAULT_ALPHA
    beta: float = config.DEFAULT_BETA

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidConfig(f"Loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")
        if self.alpha + self.beta <= 0:
            raise InvalidConfig("alpha + beta must be positive")


# --- Losses ---

def _check_shapes(probs: torch.Tensor, target: torch.Tensor):
    if tuple(probs.shape) != tuple(target.shape):
        raise ShapeMismatch(
            f"probs {tuple(probs.shape)} and target {tuple(target.shape)} differ",
            probs=tuple(probs.shape), target=tuple(target.shape),
        )


def bce_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = config.PROB_EPS) -> torch.Tensor:
    """Mean over every pixel and class of -[t log p + (1 - t) log(1 - p)], p clamped to [eps, 1 - eps]."""
    _check_shapes(probs, target)
    p = probs.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = config.DICE_SMOOTH,
              class_dim: int = -1) -> torch.Tensor:
    """Macro average over classes of 1 - (2 sum(p t) + smooth) / (sum p + sum t + smooth)."""
    _check_shapes(probs, target)
    class_dim = class_dim % probs.ndim
    dims = tuple(d for d in range(probs.ndim) if d != class_dim)
    intersection = (probs * target).sum(dim=dims)
    denominator = probs.sum(dim=dims) + target.sum(dim=dims) + smooth
    numerator = 2.0 * intersection + smooth
    # 0/0 (smooth == 0, class absent everywhere) counts as perfect overlap
    empty = denominator == 0
    ratio = torch.where(empty, torch.ones_like(numerator), numerator / denominator.masked_fill(empty, 1.0))
    return (1.0 - ratio).mean()


def hybrid_loss(probs: torch.Tensor, target: torch.Tensor, weights: LossWeights = LossWeights(),
                smooth: float = config.DICE_SMOOTH) -> torch.Tensor:
    return weights.alpha * bce_loss(probs, target) + weights.beta * dice_loss(probs, target, smooth)


def one_hot(labels, n_classes: int = config.N_CLASSES, dtype=torch.float32) -> torch.Tensor:
    """Integer labels (any shape) to a trailing one-hot axis."""
    if not torch.is_tensor(labels):
        labels = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise OutOfRangeClass(f"Labels outside [0, {n_classes})", n_classes=n_classes)
    return torch.nn.functional.one_hot(labels, n_classes).to(dtype)


def predictions_from_logits(logits) -> np.ndarray:
    """Per-pixel argmax over the trailing class axis; ties go to the lowest class index."""
    if torch.is_tensor(logits):
        logits = logits.detach().cpu().numpy()
    return np.argmax(logits, axis=-1).astype(np.uint8)


# --- Confusion counts ---

@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.int64)))
        if not self.tp.shape == self.fp.shape == self.fn.shape:
            raise ShapeMismatch("tp, fp and fn must cover the same classes")
        if (self.tp < 0).any() or (self.fp < 0).any() or (self.fn < 0).any():
            raise InvalidConfig("Confusion counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return int(self.tp.shape[0])

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    def __add__(self, other):
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        if other.n_classes != self.n_classes:
            raise ShapeMismatch(f"Cannot merge counts over {self.n_classes} and {other.n_classes} classes")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def __eq__(self, other):
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in ((self.tp, other.tp), (self.fp, other.fp), (self.fn, other.fn)))

    @classmethod
    def zeros(cls, n_classes: int = config.N_CLASSES):
        return cls(*(np.zeros(n_classes, dtype=np.int64) for _ in range(3)))


def confusion_counts(pred, truth, n_classes: int = config.N_CLASSES) -> ConfusionCounts:
    pred = pred.data if isinstance(pred, LabelMask) else np.asarray(pred)
    truth = truth.data if isinstance(truth, LabelMask) else np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"Prediction {pred.shape} and truth {truth.shape} differ", pred=pred.shape, truth=truth.shape)
    pred = pred.astype(np.int64).ravel()
    truth = truth.astype(np.int64).ravel()
    for name, values in (("prediction", pred), ("truth", truth)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise OutOfRangeClass(f"{name} holds classes outside [0, {n_classes})", n_classes=n_classes)
    matrix = np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(matrix).astype(np.int64)
    return ConfusionCounts(tp=tp, fp=matrix.sum(axis=0) - tp, fn=matrix.sum(axis=1) - tp)


# --- Metrics ---

def _safe_ratio(num, den) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_iou(counts: ConfusionCounts) -> list:
    """IoU per class, None for classes absent from both prediction and truth."""
    union = counts.tp + counts.fp + counts.fn
    return [float(t) / float(u) if u > 0 else None for t, u in zip(counts.tp, union)]


def miou(counts: ConfusionCounts) -> float:
    present = [v for v in per_class_iou(counts) if v is not None]
    if not present:
        raise NoClassesPresent("No class appears in prediction or truth")
    return float(np.mean(present))


def precision_recall_f1(counts: ConfusionCounts, average: str = "micro"):
    """(precision, recall, f1); micro pools counts over classes, macro averages present classes."""
    if average == "micro":
        tp, fp, fn = int(counts.tp.sum()), int(counts.fp.sum()), int(counts.fn.sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1
    if average != "macro":
        raise InvalidConfig(f"Unknown average '{average}'")
    present = (counts.tp + counts.fp + counts.fn) > 0
    if not present.any():
        return 0.0, 0.0, 0.0
    precision = _safe_ratio(counts.tp, counts.tp + counts.fp)
    recall = _safe_ratio(counts.tp, counts.tp + counts.fn)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return float(precision[present].mean()), float(recall[present].mean()), float(f1[present].mean())


def metrics_report(counts: ConfusionCounts, class_names: Optional[tuple] = None) -> dict:
    """JSON-ready {miou, precision, recall, f1, per_class_iou, ...}; micro P/R/F1 are the headline."""
    names = class_names or config.CLASS_NAMES[:counts.n_classes]
    precision, recall, f1 = precision_recall_f1(counts, "micro")
    macro = precision_recall_f1(counts, "macro")
    return {
        "miou": miou(counts),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "per_class_iou": dict(zip(names, per_class_iou(counts))),
        "per_class_precision": dict(zip(names, _safe_ratio(counts.tp, counts.tp + counts.fp).tolist())),
        "per_class_recall": dict(zip(names, _safe_ratio(counts.tp, counts.tp + counts.fn).tolist())),
        "macro": {"precision": macro[0], "recall": macro[1], "f1": macro[2]},
        "support": dict(zip(names, counts.support.tolist())),
    }
