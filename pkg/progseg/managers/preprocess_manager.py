"""
Percentile clip-normalization and per-band CLAHE.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import config
from ..core.errors import ImageSmallerThanGrid, InvalidConfig, WrongValueDomain
from .raster_manager import MultispectralImage, ValueDomain, canonical_order

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormalizeParams:
    p_low: float = config.DEFAULT_P_LOW
    p_high: float = config.DEFAULT_P_HIGH
    per_band: bool = True

    def __post_init__(self):
        if not (0.0 <= self.p_low < 100.0) or not (0.0 < self.p_high <= 100.0):
            raise InvalidConfig(f"Percentiles out of range: p_low={self.p_low}, p_high={self.p_high}")
        if self.p_low >= self.p_high:
            raise InvalidConfig(f"p_low ({self.p_low}) must be below p_high ({self.p_high})")


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = config.DEFAULT_CLAHE_CLIP
    tile_grid: tuple = config.DEFAULT_CLAHE_GRID
    n_bins: int = config.DEFAULT_CLAHE_BINS
    # None means every band
    bands: Optional[tuple] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "tile_grid", tuple(int(v) for v in self.tile_grid))
        if self.bands is not None:
            object.__setattr__(self, "bands", tuple(canonical_order(self.bands)))
        if not self.clip_limit > 0:
            raise InvalidConfig(f"clip_limit must be positive, got {self.clip_limit}")
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            raise InvalidConfig(f"tile_grid must be two positive integers, got {self.tile_grid}")
        if not (2 <= self.n_bins <= config.CLAHE_QUANT_MAX + 1):
            raise InvalidConfig(f"n_bins must be in [2, {config.CLAHE_QUANT_MAX + 1}], got {self.n_bins}")


# --- Percentile normalization ---

def normalize_band(values: np.ndarray, p_low: float, p_high: float) -> Optional[np.ndarray]:
    """
    Clamped linear stretch of `values` between its p_low / p_high percentiles, in float64.

    Percentiles interpolate linearly between order statistics. Returns None when the
    percentile range is degenerate.
    """
    values = np.asarray(values, dtype=np.float64)
    q_low, q_high = np.percentile(values, [p_low, p_high], method="linear")
    if q_high == q_low:
        return None
    return np.clip((values - q_low) / (q_high - q_low), 0.0, 1.0)


def percentile_normalize(img: MultispectralImage, params: NormalizeParams = NormalizeParams()) -> MultispectralImage:
    if img.value_domain != ValueDomain.RAW_REFLECTANCE:
        raise WrongValueDomain(f"percentile_normalize expects RAW_REFLECTANCE, got {img.value_domain.name}")
    out = np.empty_like(img.data, dtype=np.float32)
    if params.per_band:
        for i, band in enumerate(img.bands):
            scaled = normalize_band(img.data[..., i], params.p_low, params.p_high)
            if scaled is None:
                logger.warning(f"Degenerate percentile range for band {band.name}; writing zeros")
                out[..., i] = 0.0
            else:
                out[..., i] = scaled
    else:
        scaled = normalize_band(img.data, params.p_low, params.p_high)
        if scaled is None:
            logger.warning("Degenerate percentile range across all bands; writing zeros")
            out[...] = 0.0
        else:
            out[...] = scaled
    return img.replace(out, ValueDomain.UNIT_NORMALIZED)


# --- CLAHE ---

def _quantize(band: np.ndarray, n_bins: int) -> np.ndarray:
    return np.rint(np.clip(band, 0.0, 1.0) * (n_bins - 1)).astype(np.uint16)


def _tile_edges(length: int, n_tiles: int) -> np.ndarray:
    return (np.arange(n_tiles + 1) * length) // n_tiles


def clahe_mappings(codes: np.ndarray, params: ClaheParams) -> np.ndarray:
    """
    Per-tile equalization look-up tables, shape (rows, cols, n_bins), values in [0, 1].

    Each tile histogram is clipped at clip_limit * tile_pixels per bin and the clipped mass
    is spread evenly over all bins before taking the normalized cumulative sum. A tile whose
    pixels all share one code has no contrast to stretch and gets the identity ramp
    k / (n_bins - 1), so constant regions pass through unchanged.
    """
    identity = np.arange(params.n_bins, dtype=np.float64) / (params.n_bins - 1)
    rows, cols = params.tile_grid
    height, width = codes.shape
    row_edges = _tile_edges(height, rows)
    col_edges = _tile_edges(width, cols)
    luts = np.empty((rows, cols, params.n_bins), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            tile = codes[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            n_pixels = tile.size
            hist = np.bincount(tile.ravel(), minlength=params.n_bins).astype(np.float64)
            if np.count_nonzero(hist) == 1:
                luts[i, j] = identity
                continue
            limit = params.clip_limit * n_pixels
            clipped = np.minimum(hist, limit)
            excess = hist.sum() - clipped.sum()
            clipped += excess / params.n_bins
            luts[i, j] = np.clip(np.cumsum(clipped) / n_pixels, 0.0, 1.0)
    return luts


def _interp_axis(length: int, n_tiles: int):
    """Neighbour tile indices and bilinear weights along one axis (tile centres as knots)."""
    edges = _tile_edges(length, n_tiles)
    centres = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(length, dtype=np.float64)
    lo = np.clip(np.searchsorted(centres, pos, side="right") - 1, 0, n_tiles - 1)
    hi = np.minimum(lo + 1, n_tiles - 1)
    span = centres[hi] - centres[lo]
    weight = np.where(span > 0, (pos - centres[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(weight, 0.0, 1.0)


def clahe_band(band: np.ndarray, params: ClaheParams) -> np.ndarray:
    rows, cols = params.tile_grid
    height, width = band.shape
    if height < rows or width < cols:
        raise ImageSmallerThanGrid(
            f"Band of {height}x{width} is smaller than tile grid {params.tile_grid}",
            shape=(height, width), tile_grid=params.tile_grid,
        )
    codes = _quantize(band, params.n_bins)
    luts = clahe_mappings(codes, params)
    r_lo, r_hi, r_w = _interp_axis(height, rows)
    c_lo, c_hi, c_w = _interp_axis(width, cols)
    r_lo, r_hi, r_w = r_lo[:, None], r_hi[:, None], r_w[:, None]
    c_lo, c_hi, c_w = c_lo[None, :], c_hi[None, :], c_w[None, :]
    top = (1.0 - c_w) * luts[r_lo, c_lo, codes] + c_w * luts[r_lo, c_hi, codes]
    bottom = (1.0 - c_w) * luts[r_hi, c_lo, codes] + c_w * luts[r_hi, c_hi, codes]
    return np.clip((1.0 - r_w) * top + r_w * bottom, 0.0, 1.0)


def clahe_equalize(img: MultispectralImage, params: ClaheParams = ClaheParams()) -> MultispectralImage:
    if img.value_domain != ValueDomain.UNIT_NORMALIZED:
        raise WrongValueDomain(f"clahe_equalize expects UNIT_NORMALIZED, got {img.value_domain.name}")
    targets = img.bands if params.bands is None else [b for b in img.bands if b in params.bands]
    out = img.data.copy()
    for band in targets:
        i = img.bands.index(band)
        out[..., i] = clahe_band(img.data[..., i], params)
    return img.replace(out)


def preprocess_image(img: MultispectralImage, normalize: NormalizeParams = NormalizeParams(),
                     clahe: Optional[ClaheParams] = ClaheParams()) -> MultispectralImage:
    """Normalizes raw reflectance, then applies CLAHE when `clahe` is given."""
    if img.value_domain == ValueDomain.RAW_REFLECTANCE:
        img = percentile_normalize(img, normalize)
    if clahe is not None:
        img = clahe_equalize(img, clahe)
    return img

