"""
Tiling of image/mask pairs into patches, class-balance filters and tile-level splits.
"""

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import config
from ..core.fileio import write_json_atomic
from ..core.errors import (
    DimensionMismatch,
    IndivisibleDimensions,
    InvalidConfig,
    IoError,
    MissingPatchSet,
    TooFewTiles,
)
from .raster_manager import (
    LabelClass,
    LabelMask,
    MultispectralImage,
    canonical_order,
    load_pair,
    save_raster,
)

logger = logging.getLogger(__name__)


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"


@dataclass(frozen=True)
class PatchOrigin:
    tile_id: str
    row_off: int
    col_off: int

    def sort_key(self):
        return (self.tile_id, self.row_off, self.col_off)


@dataclass(eq=False)
class Patch:
    image: MultispectralImage
    mask: LabelMask
    origin: PatchOrigin
    size: int

    def __post_init__(self):
        if self.size not in config.PATCH_SIZES:
            raise InvalidConfig(f"Patch size {self.size} not in {config.PATCH_SIZES}")
        if self.image.data.shape[:2] != (self.size, self.size) or self.mask.shape != (self.size, self.size):
            raise DimensionMismatch(
                f"Patch of size {self.size} holds image {self.image.data.shape[:2]} / mask {self.mask.shape}"
            )

    @property
    def other_fraction(self) -> float:
        return other_fraction(self.mask)


@dataclass(eq=False)
class PatchSet:
    patches: list
    size: int
    band_set: list
    split: Split

    def __post_init__(self):
        self.band_set = canonical_order(self.band_set)
        self.split = Split(self.split)
        for p in self.patches:
            if p.size != self.size:
                raise DimensionMismatch(f"Patch {p.origin} has size {p.size}, set size is {self.size}")
            if p.image.bands != self.band_set:
                raise DimensionMismatch(f"Patch {p.origin} bands differ from the set's band_set")

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)


# --- Class balance ---

def other_fraction(mask: LabelMask) -> float:
    data = mask.data
    if data.size == 0:
        return 0.0
    return float(np.count_nonzero(data == LabelClass.OTHER)) / float(data.size)


def filter_patches(patches: Sequence[Patch], other_threshold: float = config.PATCH_OTHER_THRESHOLD) -> list:
    """Keeps patches whose OTHER share does not exceed the threshold."""
    _check_threshold(other_threshold)
    kept = [p for p in patches if other_fraction(p.mask) <= other_threshold]
    logger.debug(f"filter_patches: kept {len(kept)}/{len(patches)} at threshold {other_threshold}")
    return kept


def filter_tiles(tiles: Sequence[tuple], other_threshold: float = config.TILE_OTHER_THRESHOLD) -> list:
    """Same rule as filter_patches for whole (image, mask) tiles."""
    _check_threshold(other_threshold)
    kept = [t for t in tiles if other_fraction(t[1]) <= other_threshold]
    logger.debug(f"filter_tiles: kept {len(kept)}/{len(tiles)} at threshold {other_threshold}")
    return kept


def _check_threshold(value: float):
    if not 0.0 <= value <= 1.0:
        raise InvalidConfig(f"other_threshold must be in [0, 1], got {value}")


# --- Tiling ---

def tile(img: MultispectralImage, mask: LabelMask, size: int, tile_id: str = "tile",
         stride: Optional[int] = None) -> list:
    """
    Cuts co-registered windows of `size`; stride defaults to `size` (non-overlapping grid).
    Output is ordered by (row_off, col_off).
    """
    stride = size if stride is None else int(stride)
    if stride < 1:
        raise InvalidConfig(f"stride must be positive, got {stride}")
    height, width = img.height, img.width
    if mask.shape != (height, width):
        raise DimensionMismatch(f"Mask {mask.shape} not co-registered with image {(height, width)}")
    if height < size or width < size or (height - size) % stride or (width - size) % stride:
        raise IndivisibleDimensions(
            f"{height}x{width} cannot be tiled by size {size} with stride {stride}",
            shape=(height, width), size=size, stride=stride,
        )
    patches = []
    for row in range(0, height - size + 1, stride):
        for col in range(0, width - size + 1, stride):
            window = img.replace(np.ascontiguousarray(img.data[row:row + size, col:col + size]))
            patches.append(Patch(
                image=window,
                mask=LabelMask(mask.data[row:row + size, col:col + size].copy()),
                origin=PatchOrigin(tile_id, row, col),
                size=size,
            ))
    return patches


def stitch(patches: Sequence[Patch], shape: tuple):
    """Reassembles patches of one tile into (H x W x C image data, H x W mask data)."""
    height, width = shape
    if not patches:
        raise InvalidConfig("Nothing to stitch")
    channels = patches[0].image.n_bands
    data = np.zeros((height, width, channels), dtype=np.float32)
    mask = np.zeros((height, width), dtype=np.uint8)
    for p in patches:
        r, c, s = p.origin.row_off, p.origin.col_off, p.size
        data[r:r + s, c:c + s] = p.image.data
        mask[r:r + s, c:c + s] = p.mask.data
    return data, mask


# --- Splits ---

def split_train_val(tile_ids: Sequence[str], val_ratio: float, seed: int):
    """Deterministic tile-level partition. Returns (train ids, val ids) as sets."""
    if not 0.0 < val_ratio < 1.0:
        raise InvalidConfig(f"val_ratio must be in (0, 1), got {val_ratio}")
    ids = sorted(set(tile_ids))
    n_val = int(round(len(ids) * val_ratio))
    if n_val == 0 or n_val == len(ids):
        raise TooFewTiles(
            f"{len(ids)} tiles at val_ratio {val_ratio} leave an empty split",
            n_tiles=len(ids), val_ratio=val_ratio,
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    train = set(ids) - val
    logger.info(f"Split {len(ids)} tiles into {len(train)} train / {len(val)} val (seed {seed})")
    return train, val


# --- Patch sets on disk ---

def patch_dir(root, size: int) -> Path:
    return Path(root) / config.PATCH_DIR_TEMPLATE.format(size=size)


def read_tile_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"Cannot read tile manifest {path}: {e}", path=path) from e
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tiles"), list):
        raise IoError(f"Tile manifest {path} has no 'tiles' list", path=path)
    return manifest


def load_tiles(manifest_path, bands=None, workers: int = 4) -> list:
    """Loads every tile of a manifest as (tile_id, image, mask), in manifest order."""
    manifest_path = Path(manifest_path)
    manifest = read_tile_manifest(manifest_path)
    root = manifest_path.parent

    def _load(entry):
        img, mask = load_pair(root / entry["path"], bands)
        if mask is None:
            raise IoError(f"Tile {entry['path']} carries no mask payload", path=entry["path"])
        return entry["tile_id"], img, mask

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(_load, manifest["tiles"]))


def build_patch_sets(tiles: Sequence[tuple], sizes: Sequence[int], split: tuple, out_root,
                     tile_other_threshold: float = config.TILE_OTHER_THRESHOLD,
                     patch_other_threshold: float = config.PATCH_OTHER_THRESHOLD,
                     stride: Optional[int] = None) -> dict:
    """
    Writes ``patches_<S>/manifest.jsonl`` plus one archive per patch for every size.

    `tiles` holds (tile_id, image, mask). The tile-level OTHER filter runs first; the patch-level
    filter applies to sizes smaller than the tile. `split` is the (train ids, val ids) pair shared
    by every size. Returns {size: manifest path}.
    """
    train_ids, val_ids = split
    kept = filter_tiles([(img, mask, tile_id) for tile_id, img, mask in tiles], tile_other_threshold)
    logger.info(f"Tile filter kept {len(kept)}/{len(tiles)} tiles at threshold {tile_other_threshold}")
    manifests = {}
    for size in sizes:
        out_dir = patch_dir(out_root, size)
        entries = []
        for img, mask, tile_id in sorted(kept, key=lambda t: t[2]):
            if tile_id in train_ids:
                which = Split.TRAIN
            elif tile_id in val_ids:
                which = Split.VAL
            else:
                continue
            patches = tile(img, mask, size, tile_id=tile_id, stride=stride)
            if size < min(img.height, img.width):
                patches = filter_patches(patches, patch_other_threshold)
            for p in sorted(patches, key=lambda q: q.origin.sort_key()):
                rel = f"{tile_id}_r{p.origin.row_off:04d}_c{p.origin.col_off:04d}{config.ARCHIVE_SUFFIX}"
                save_raster(p.image, out_dir / rel, mask=p.mask)
                entries.append({
                    "path": rel,
                    "tile_id": tile_id,
                    "row_off": p.origin.row_off,
                    "col_off": p.origin.col_off,
                    "size": size,
                    "split": which.value,
                    "other_fraction": p.other_fraction,
                })
        manifest_path = out_dir / config.PATCH_MANIFEST_NAME
        write_json_atomic(manifest_path, entries, lines=True)
        n_val = sum(1 for e in entries if e["split"] == Split.VAL.value)
        logger.info(f"Wrote {len(entries)} patches of size {size} ({n_val} val) to {out_dir}")
        manifests[size] = manifest_path
    return manifests


def read_patch_manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise MissingPatchSet(f"Patch manifest not found: {path}", path=path)
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                entries.append(json.loads(line))
    return entries


def load_patch_set(manifest_path, split: Split, bands: Sequence) -> PatchSet:
    """Loads one split of a patch manifest, keeping `bands` only."""
    manifest_path = Path(manifest_path)
    split = Split(split)
    entries = [e for e in read_patch_manifest(manifest_path) if e["split"] == split.value]
    bands = canonical_order(bands)
    patches = []
    size = None
    for e in entries:
        img, mask = load_pair(manifest_path.parent / e["path"], bands)
        size = int(e["size"])
        patches.append(Patch(
            image=img,
            mask=mask,
            origin=PatchOrigin(e["tile_id"], int(e["row_off"]), int(e["col_off"])),
            size=size,
        ))
    if size is None:
        # empty split: fall back to the size encoded in the directory name
        size = int(manifest_path.parent.name.rsplit("_", 1)[-1])
    patches.sort(key=lambda p: p.origin.sort_key())
    logger.info(f"Loaded {len(patches)} {split.value} patches of size {size} from {manifest_path}")
    return PatchSet(patches=patches, size=size, band_set=bands, split=split)
