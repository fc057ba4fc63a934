"""
Synthetic multispectral irrigation scenes with exact ground truth.

Sprinkler (center-pivot) fields are discs with concentric ring texture, flood fields are
axis-aligned rectangles with furrow stripes, everything else is OTHER. Texture runs at a
period of a few pixels so that detail is visible in small patches.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import config
from ..core.errors import InvalidConfig, OverfullScene
from ..core.fileio import write_json_atomic
from .raster_manager import (
    CANONICAL_BANDS,
    BandId,
    LabelClass,
    LabelMask,
    MultispectralImage,
    ValueDomain,
    save_raster,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneParams:
    size: tuple = (config.TILE_SIZE, config.TILE_SIZE)
    n_bands: int = len(CANONICAL_BANDS)
    n_pivots: int = config.DEFAULT_N_PIVOTS
    n_floods: int = config.DEFAULT_N_FLOODS
    pivot_radius: tuple = config.DEFAULT_PIVOT_RADIUS
    flood_side: tuple = config.DEFAULT_FLOOD_SIDE
    # class name -> per-band means over the canonical bands; None uses the built-in profile
    spectral_profile: Optional[dict] = None
    profile_sigma: float = config.DEFAULT_PROFILE_SIGMA
    nir_only_class: bool = False
    noise_sigma: float = config.DEFAULT_NOISE_SIGMA
    texture_amplitude: float = config.DEFAULT_TEXTURE_AMPLITUDE
    texture_period: float = config.DEFAULT_TEXTURE_PERIOD
    coverage_cap: float = config.DEFAULT_COVERAGE_CAP
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        object.__setattr__(self, "pivot_radius", tuple(int(v) for v in self.pivot_radius))
        object.__setattr__(self, "flood_side", tuple(int(v) for v in self.flood_side))
        if self.spectral_profile is not None:
            profile = {str(k): tuple(float(x) for x in v) for k, v in self.spectral_profile.items()}
            object.__setattr__(self, "spectral_profile", profile)
        if len(self.size) != 2 or min(self.size) < 1:
            raise InvalidConfig(f"size must be two positive integers, got {self.size}")
        if not 1 <= self.n_bands <= len(CANONICAL_BANDS):
            raise InvalidConfig(f"n_bands must be in [1, {len(CANONICAL_BANDS)}], got {self.n_bands}")
        if self.n_pivots < 0 or self.n_floods < 0:
            raise InvalidConfig("Field counts must be non-negative")
        for name, (lo, hi) in (("pivot_radius", self.pivot_radius), ("flood_side", self.flood_side)):
            if lo < 1 or lo > hi:
                raise InvalidConfig(f"{name} must be an ordered positive range, got {(lo, hi)}")
        if self.nir_only_class and BandId.NIR not in self.bands:
            raise InvalidConfig("nir_only_class needs the NIR band")
        if min(self.noise_sigma, self.profile_sigma, self.texture_amplitude) < 0 or self.texture_period <= 0:
            raise InvalidConfig("Noise, texture amplitude and texture period must be non-negative / positive")
        if not 0.0 < self.coverage_cap <= 1.0:
            raise InvalidConfig(f"coverage_cap must be in (0, 1], got {self.coverage_cap}")

    @property
    def bands(self) -> list:
        return list(CANONICAL_BANDS[:self.n_bands])

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("size", "pivot_radius", "flood_side"):
            data[key] = list(data[key])
        if self.spectral_profile is not None:
            data["spectral_profile"] = {k: list(v) for k, v in self.spectral_profile.items()}
        return data


def spectral_means(params: SceneParams) -> np.ndarray:
    """Class x band mean table (rows in LabelClass order) for the scene's bands."""
    profile = params.spectral_profile or config.DEFAULT_SPECTRAL_PROFILE
    try:
        table = np.array([profile[c.name] for c in LabelClass], dtype=np.float64)
    except KeyError as e:
        raise InvalidConfig(f"spectral_profile lacks class {e}") from e
    if table.shape[1] != len(CANONICAL_BANDS):
        raise InvalidConfig(f"spectral_profile rows need {len(CANONICAL_BANDS)} band means")
    if params.nir_only_class:
        nir = int(BandId.NIR)
        flood = table[LabelClass.FLOOD].copy()
        table[LabelClass.FLOOD] = table[LabelClass.OTHER]
        table[LabelClass.FLOOD, nir] = flood[nir]
    return table[:, :params.n_bands]


def expected_other_fraction(params: SceneParams) -> float:
    """Expected OTHER share implied by field counts and the uniform size ranges."""
    r = np.arange(params.pivot_radius[0], params.pivot_radius[1] + 1, dtype=np.float64)
    s = np.arange(params.flood_side[0], params.flood_side[1] + 1, dtype=np.float64)
    covered = params.n_pivots * np.pi * np.mean(r ** 2) + params.n_floods * np.mean(s) ** 2
    return float(1.0 - covered / (params.size[0] * params.size[1]))


# --- Field placement ---

def _disc(rows, cols, cy, cx, radius):
    return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2


def _place_fields(rng: np.random.Generator, params: SceneParams) -> list:
    """Draws non-touching fields; returns [(LabelClass, footprint bool array, shape info)]."""
    height, width = params.size
    rows, cols = np.mgrid[0:height, 0:width]
    occupied = np.zeros((height, width), dtype=bool)
    cap = params.coverage_cap * height * width
    fields = []
    requests = [LabelClass.SPRINKLER] * params.n_pivots + [LabelClass.FLOOD] * params.n_floods
    for cls in requests:
        for _ in range(config.FIELD_PLACEMENT_ATTEMPTS):
            if cls == LabelClass.SPRINKLER:
                radius = int(rng.integers(params.pivot_radius[0], params.pivot_radius[1] + 1))
                if 2 * radius + 1 > min(height, width):
                    continue
                cy = int(rng.integers(radius, height - radius))
                cx = int(rng.integers(radius, width - radius))
                footprint = _disc(rows, cols, cy, cx, radius)
                info = {"center": (cy, cx), "radius": radius}
            else:
                h = int(rng.integers(params.flood_side[0], params.flood_side[1] + 1))
                w = int(rng.integers(params.flood_side[0], params.flood_side[1] + 1))
                if h > height or w > width:
                    continue
                top = int(rng.integers(0, height - h + 1))
                left = int(rng.integers(0, width - w + 1))
                footprint = np.zeros((height, width), dtype=bool)
                footprint[top:top + h, left:left + w] = True
                info = {"top": top, "left": left, "height": h, "width": w, "vertical": bool(rng.integers(0, 2))}
            # one-pixel gap keeps fields as separate components
            grown = footprint.copy()
            grown[1:] |= footprint[:-1]
            grown[:-1] |= footprint[1:]
            grown[:, 1:] |= footprint[:, :-1]
            grown[:, :-1] |= footprint[:, 1:]
            if (grown & occupied).any() or occupied.sum() + footprint.sum() > cap:
                continue
            occupied |= footprint
            fields.append((cls, footprint, info))
            break
        else:
            raise OverfullScene(
                f"Could not place a {cls.name} field within coverage cap {params.coverage_cap}",
                placed=len(fields), requested=len(requests),
            )
    return fields


def _texture(cls: LabelClass, info: dict, params: SceneParams, rows, cols) -> np.ndarray:
    phase = 2.0 * np.pi / params.texture_period
    if cls == LabelClass.SPRINKLER:
        cy, cx = info["center"]
        return params.texture_amplitude * np.sin(phase * np.hypot(rows - cy, cols - cx))
    offset = cols - info["left"] if info["vertical"] else rows - info["top"]
    return params.texture_amplitude * np.sin(phase * offset)


# --- Scenes ---

def generate_scene(params: SceneParams = SceneParams()):
    """Returns (MultispectralImage in UNIT_NORMALIZED domain, LabelMask); deterministic in params.seed."""
    rng = np.random.default_rng(params.seed)
    height, width = params.size
    fields = _place_fields(rng, params)

    labels = np.full((height, width), LabelClass.OTHER, dtype=np.uint8)
    texture = np.zeros((height, width), dtype=np.float64)
    rows, cols = np.mgrid[0:height, 0:width]
    for cls, footprint, info in fields:
        labels[footprint] = cls
        texture[footprint] = _texture(cls, info, params, rows, cols)[footprint]

    means = spectral_means(params)
    data = means[labels]
    data += rng.normal(0.0, params.profile_sigma, size=data.shape)
    data += rng.normal(0.0, params.noise_sigma, size=data.shape)
    if params.nir_only_class:
        # the NIR-coded class carries its texture in NIR only
        nir = params.bands.index(BandId.NIR)
        flood = labels == LabelClass.FLOOD
        data[..., nir] += np.where(flood, texture, 0.0)
        data += np.where(flood, 0.0, texture)[..., None]
    else:
        data += texture[..., None]

    img = MultispectralImage(
        data=np.clip(data, 0.0, 1.0).astype(np.float32),
        bands=params.bands,
        value_domain=ValueDomain.UNIT_NORMALIZED,
    )
    logger.debug(f"Scene seed {params.seed}: {len(fields)} fields, "
                 f"OTHER share {np.mean(labels == LabelClass.OTHER):.3f}")
    return img, LabelMask(labels)


def derive_tile_seeds(seed: int, n_tiles: int) -> list:
    """Per-tile seeds from numpy SeedSequence.spawn (stable for a given (seed, n_tiles) prefix)."""
    children = np.random.SeedSequence(seed).spawn(n_tiles)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def generate_dataset(n_tiles: int, params_template: SceneParams, seed: int, out_dir, workers: int = 4) -> Path:
    """
    Writes ``tile_0000.pseg`` ... (image + mask) and ``tiles.json`` into `out_dir`.
    Returns the manifest path.
    """
    if n_tiles < 2:
        raise InvalidConfig(f"n_tiles must be >= 2, got {n_tiles}")
    out_dir = Path(out_dir)
    seeds = derive_tile_seeds(seed, n_tiles)

    def _write(index):
        params = replace(params_template, seed=seeds[index])
        img, mask = generate_scene(params)
        rel = f"tile_{index:04d}{config.ARCHIVE_SUFFIX}"
        save_raster(img, out_dir / rel, mask=mask)
        return {
            "tile_id": f"tile_{index:04d}",
            "path": rel,
            "seed": seeds[index],
            "other_fraction": float(np.mean(mask.data == LabelClass.OTHER)),
        }

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        tiles = list(pool.map(_write, range(n_tiles)))

    manifest = {
        "seed": seed,
        "n_tiles": n_tiles,
        "bands": [b.name for b in params_template.bands],
        "params": params_template.to_dict(),
        "tiles": tiles,
    }
    manifest_path = out_dir / config.TILE_MANIFEST_NAME
    write_json_atomic(manifest_path, manifest)
    logger.info(f"Generated {n_tiles} synthetic tiles (seed {seed}) in {out_dir}")
    return manifest_path
