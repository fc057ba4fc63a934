"""
Raster I/O for multispectral images and label masks.

Two on-disk formats share one interface:

* ARCHIVE (``.pseg``): little-endian container, no geospatial dependencies::

      magic        4s   b"PSEG"
      version      u2
      height       u4
      width        u4
      channels     u2   (0 for a mask-only file)
      band codes   u1 x channels   (BandId values)
      value domain u1   (0 = RAW_REFLECTANCE, 1 = UNIT_NORMALIZED)
      resolution   f8   metres per pixel
      payload      f4 x height*width*channels, row-major (H, W, C)
      mask         u1 x height*width, optional

* GEOTIFF (``.tif``): via rasterio; band names in band descriptions, value domain in a
  dataset tag, masks as separate single-band uint8 files.
"""

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ..core import config
from ..core.fileio import write_bytes_atomic
from ..core.errors import (
    CorruptFile,
    DimensionMismatch,
    InvalidConfig,
    InvalidLabel,
    IoError,
    MissingBand,
    WrongValueDomain,
)

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sHIIH")
_TRAILER = struct.Struct("<Bd")


class BandId(enum.IntEnum):
    BLUE = 0
    GREEN = 1
    RED = 2
    SWIR1 = 3
    SWIR2 = 4
    NIR = 5
    THERMAL = 6


CANONICAL_BANDS = tuple(BandId[name] for name in config.CANONICAL_BAND_NAMES)


class ValueDomain(enum.IntEnum):
    RAW_REFLECTANCE = 0
    UNIT_NORMALIZED = 1


class RasterFormat(str, enum.Enum):
    GEOTIFF = "GEOTIFF"
    ARCHIVE = "ARCHIVE"


class LabelClass(enum.IntEnum):
    OTHER = 0
    FLOOD = 1
    SPRINKLER = 2


def canonical_order(bands: Sequence[BandId]) -> list:
    """Returns the bands sorted into canonical (BLUE..THERMAL) order."""
    return sorted((BandId(b) for b in bands), key=int)


@dataclass(eq=False)
class MultispectralImage:
    data: np.ndarray
    bands: list
    resolution_m: float = config.DEFAULT_RESOLUTION_M
    value_domain: ValueDomain = ValueDomain.RAW_REFLECTANCE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.bands = [BandId(b) for b in self.bands]
        self.value_domain = ValueDomain(self.value_domain)
        if self.data.ndim != 3:
            raise DimensionMismatch(f"Image data must be H x W x C, got shape {self.data.shape}")
        if self.data.shape[2] != len(self.bands):
            raise DimensionMismatch(
                f"Image has {self.data.shape[2]} channels but {len(self.bands)} bands",
                shape=self.data.shape, bands=[b.name for b in self.bands],
            )
        if len(set(self.bands)) != len(self.bands):
            raise InvalidConfig(f"Duplicate bands in {[b.name for b in self.bands]}")
        if self.value_domain == ValueDomain.UNIT_NORMALIZED and self.data.size:
            if float(self.data.min()) < 0.0 or float(self.data.max()) > 1.0:
                raise WrongValueDomain("UNIT_NORMALIZED image has values outside [0, 1]")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    def band(self, band_id: BandId) -> np.ndarray:
        return self.data[..., self.bands.index(BandId(band_id))]

    def replace(self, data: np.ndarray, value_domain: Optional[ValueDomain] = None):
        return MultispectralImage(
            data=data,
            bands=list(self.bands),
            resolution_m=self.resolution_m,
            value_domain=self.value_domain if value_domain is None else value_domain,
        )

    def __eq__(self, other):
        if not isinstance(other, MultispectralImage):
            return NotImplemented
        return (
            self.bands == other.bands
            and self.value_domain == other.value_domain
            and self.resolution_m == other.resolution_m
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(eq=False)
class LabelMask:
    data: np.ndarray
    classes: tuple = field(default=config.CLASS_NAMES)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DimensionMismatch(f"Mask must be H x W, got shape {self.data.shape}")
        if self.data.dtype.kind not in "iub":
            if self.data.dtype.kind != "f" or not np.array_equal(self.data, np.round(self.data)):
                raise InvalidLabel(f"Mask values must be integer class codes, got dtype {self.data.dtype}")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= len(self.classes)):
            raise InvalidLabel(
                f"Mask values must be in [0, {len(self.classes) - 1}]",
                min=int(self.data.min()), max=int(self.data.max()),
            )
        self.data = self.data.astype(np.uint8, copy=False)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


# --- Band selection ---

def parse_band_code(code: str) -> list:
    """
    Parses a band subset such as "RGBNS1S2Th" or "red,green,nir" into canonical order.
    """
    if not code or not code.strip():
        raise InvalidConfig("Empty band code")
    code = code.strip()
    if "," in code or code.upper() in config.CANONICAL_BAND_NAMES:
        names = [part.strip().upper() for part in code.split(",") if part.strip()]
        try:
            bands = [BandId[name] for name in names]
        except KeyError as e:
            raise InvalidConfig(f"Unknown band name {e} in '{code}'") from e
    else:
        bands = []
        i = 0
        tokens = sorted(config.BAND_CODE_TOKENS, key=len, reverse=True)
        while i < len(code):
            for token in tokens:
                if code.startswith(token, i):
                    bands.append(BandId[config.BAND_CODE_TOKENS[token]])
                    i += len(token)
                    break
            else:
                raise InvalidConfig(f"Unknown band token at '{code[i:]}' in '{code}'")
    if len(set(bands)) != len(bands):
        raise InvalidConfig(f"Duplicate bands in '{code}'")
    return canonical_order(bands)


def band_code(bands: Sequence[BandId]) -> str:
    """Shorthand for report rows: RGB first, then N, S1, S2, Th."""
    reverse = {v: k for k, v in config.BAND_CODE_TOKENS.items()}
    present = {BandId(b).name for b in bands}
    order = ["RED", "GREEN", "BLUE", "NIR", "SWIR1", "SWIR2", "THERMAL"]
    return "".join(reverse[name] for name in order if name in present)


def select_bands(img: MultispectralImage, subset: Sequence[BandId]) -> MultispectralImage:
    """Returns a copy holding exactly `subset`, in canonical order."""
    wanted = canonical_order(subset)
    missing = [b.name for b in wanted if b not in img.bands]
    if missing:
        raise MissingBand(f"Image lacks bands {missing}", available=[b.name for b in img.bands])
    idx = [img.bands.index(b) for b in wanted]
    return MultispectralImage(
        data=np.ascontiguousarray(img.data[..., idx]),
        bands=wanted,
        resolution_m=img.resolution_m,
        value_domain=img.value_domain,
    )


def _to_canonical(img: MultispectralImage, expected_bands: Optional[Sequence[BandId]]):
    wanted = canonical_order(img.bands if expected_bands is None else expected_bands)
    return select_bands(img, wanted)


# --- Format detection ---

def _detect_format(path: Path) -> RasterFormat:
    suffix = path.suffix.lower()
    if suffix in config.GEOTIFF_SUFFIXES:
        return RasterFormat.GEOTIFF
    if suffix == config.ARCHIVE_SUFFIX:
        return RasterFormat.ARCHIVE
    try:
        with open(path, "rb") as f:
            head = f.read(len(config.ARCHIVE_MAGIC))
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}", path=path) from e
    if head == config.ARCHIVE_MAGIC:
        return RasterFormat.ARCHIVE
    return RasterFormat.GEOTIFF


# --- ARCHIVE codec ---

def _encode_archive(data: Optional[np.ndarray], bands, value_domain, resolution_m, mask, shape):
    height, width = shape
    channels = 0 if data is None else data.shape[2]
    chunks = [
        _HEADER.pack(config.ARCHIVE_MAGIC, config.ARCHIVE_VERSION, height, width, channels),
        bytes(int(b) for b in bands),
        _TRAILER.pack(int(value_domain), float(resolution_m)),
    ]
    if data is not None:
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    if mask is not None:
        chunks.append(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return chunks


def _decode_archive(path: Path):
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}", path=path) from e
    if len(blob) < _HEADER.size:
        raise CorruptFile(f"{path} is too short for a PSEG header", path=path)
    magic, version, height, width, channels = _HEADER.unpack_from(blob, 0)
    if magic != config.ARCHIVE_MAGIC:
        raise CorruptFile(f"{path} has bad magic {magic!r}", path=path)
    if version != config.ARCHIVE_VERSION:
        raise CorruptFile(f"{path} has unsupported archive version {version}", path=path)
    offset = _HEADER.size
    if len(blob) < offset + channels + _TRAILER.size:
        raise CorruptFile(f"{path} header is truncated", path=path)
    codes = list(blob[offset:offset + channels])
    offset += channels
    domain_flag, resolution_m = _TRAILER.unpack_from(blob, offset)
    offset += _TRAILER.size
    try:
        bands = [BandId(c) for c in codes]
        value_domain = ValueDomain(domain_flag)
    except ValueError as e:
        raise CorruptFile(f"{path} has invalid band code or value domain: {e}", path=path) from e

    n_payload = height * width * channels * 4
    n_mask = height * width
    remaining = len(blob) - offset
    if remaining not in (n_payload, n_payload + n_mask):
        raise DimensionMismatch(
            f"{path} declares {height}x{width}x{channels} but holds {remaining} payload bytes",
            path=path, declared=(height, width, channels),
        )
    data = np.frombuffer(blob, dtype="<f4", count=height * width * channels, offset=offset)
    data = data.reshape(height, width, channels).astype(np.float32)
    mask = None
    if remaining == n_payload + n_mask:
        mask = np.frombuffer(blob, dtype=np.uint8, count=n_mask, offset=offset + n_payload)
        mask = mask.reshape(height, width).copy()
    return data, bands, value_domain, resolution_m, mask


# --- GeoTIFF codec ---

def _rasterio():
    try:
        import rasterio
    except ImportError as e:
        raise IoError("GeoTIFF support requires rasterio (pip install progseg[geotiff])") from e
    return rasterio


def _read_geotiff(path: Path):
    rasterio = _rasterio()
    try:
        with rasterio.open(path) as ds:
            stack = ds.read().astype(np.float32)
            descriptions = list(ds.descriptions or [])
            tags = ds.tags()
            res = ds.res[0] if ds.res else config.DEFAULT_RESOLUTION_M
    except rasterio.errors.RasterioIOError as e:
        raise CorruptFile(f"Cannot open GeoTIFF {path}: {e}", path=path) from e
    if len(descriptions) != stack.shape[0] or not all(descriptions):
        raise CorruptFile(f"{path} lacks band descriptions naming its bands", path=path)
    try:
        bands = [BandId[d.upper()] for d in descriptions]
    except KeyError as e:
        raise CorruptFile(f"{path} names an unknown band {e}", path=path) from e
    domain_name = tags.get(config.GEOTIFF_VALUE_DOMAIN_TAG, ValueDomain.RAW_REFLECTANCE.name)
    try:
        domain = ValueDomain[domain_name]
    except KeyError as e:
        raise CorruptFile(f"{path} has unknown value domain tag {domain_name!r}", path=path) from e
    return np.transpose(stack, (1, 2, 0)), bands, domain, float(res)


def _write_geotiff(path: Path, stack: np.ndarray, descriptions, dtype, resolution_m, tags=None):
    rasterio = _rasterio()
    from rasterio.transform import from_origin

    profile = {
        "driver": "GTiff",
        "height": stack.shape[1],
        "width": stack.shape[2],
        "count": stack.shape[0],
        "dtype": dtype,
        "transform": from_origin(0.0, 0.0, resolution_m, resolution_m),
    }
    try:
        config.ensure_dir(path.parent)
        with rasterio.open(path, "w", **profile) as dst:
            dst.write(stack.astype(dtype))
            for i, name in enumerate(descriptions, start=1):
                dst.set_band_description(i, name)
            if tags:
                dst.update_tags(**tags)
    except (OSError, rasterio.errors.RasterioIOError) as e:
        raise IoError(f"Cannot write GeoTIFF {path}: {e}", path=path) from e


# --- Public API ---

def load_raster(path, expected_bands: Optional[Sequence[BandId]] = None) -> MultispectralImage:
    """
    Loads a raster and returns its `expected_bands` (all bands when None) in canonical order.
    """
    path = Path(path)
    if not path.is_file():
        raise IoError(f"Raster not found: {path}", path=path)
    fmt = _detect_format(path)
    if fmt is RasterFormat.ARCHIVE:
        data, bands, domain, res, _ = _decode_archive(path)
        if not bands:
            raise MissingBand(f"{path} is a mask-only archive", path=path)
    else:
        data, bands, domain, res = _read_geotiff(path)
    img = MultispectralImage(data=data, bands=bands, resolution_m=res, value_domain=domain)
    logger.debug(f"Loaded {fmt.value} {path} ({img.height}x{img.width}, bands={[b.name for b in bands]})")
    return _to_canonical(img, expected_bands)


def load_pair(path, expected_bands: Optional[Sequence[BandId]] = None):
    """Loads an ARCHIVE holding image and mask. Returns (image, mask or None)."""
    path = Path(path)
    img = load_raster(path, expected_bands)
    mask = load_mask(path) if _detect_format(path) is RasterFormat.ARCHIVE else None
    if mask is not None and mask.shape != (img.height, img.width):
        raise DimensionMismatch(f"Mask shape {mask.shape} differs from image in {path}", path=path)
    return img, mask


def save_raster(img: MultispectralImage, path, format: RasterFormat = RasterFormat.ARCHIVE,
                mask: Optional[LabelMask] = None):
    """
    Writes `img`. With ARCHIVE, `mask` is stored as a second payload in the same file;
    with GEOTIFF it goes to a sibling ``<stem>_mask.tif``.
    """
    path = Path(path)
    format = RasterFormat(format)
    if mask is not None and mask.shape != (img.height, img.width):
        raise DimensionMismatch(f"Mask shape {mask.shape} does not match image {img.data.shape[:2]}")
    if format is RasterFormat.ARCHIVE:
        chunks = _encode_archive(
            img.data, img.bands, img.value_domain, img.resolution_m,
            None if mask is None else mask.data, (img.height, img.width),
        )
        write_bytes_atomic(path, chunks)
    else:
        _write_geotiff(
            path,
            np.transpose(img.data, (2, 0, 1)),
            [b.name for b in img.bands],
            "float32",
            img.resolution_m,
            tags={config.GEOTIFF_VALUE_DOMAIN_TAG: img.value_domain.name},
        )
        if mask is not None:
            save_mask(mask, geotiff_mask_path(path), RasterFormat.GEOTIFF, img.resolution_m)
    logger.debug(f"Saved {format.value} {path}")
    return path


def geotiff_mask_path(path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}_mask{path.suffix}")


def save_mask(mask: LabelMask, path, format: RasterFormat = RasterFormat.ARCHIVE,
              resolution_m: float = config.DEFAULT_RESOLUTION_M):
    """Writes a mask-only raster (ARCHIVE with zero channels, or single-band uint8 GeoTIFF)."""
    path = Path(path)
    if RasterFormat(format) is RasterFormat.ARCHIVE:
        chunks = _encode_archive(None, [], ValueDomain.RAW_REFLECTANCE, resolution_m, mask.data, mask.shape)
        write_bytes_atomic(path, chunks)
    else:
        _write_geotiff(path, mask.data[None, ...], ["MASK"], "uint8", resolution_m)
    return path


def load_mask(path) -> Optional[LabelMask]:
    """Reads the mask payload of an ARCHIVE, or band 1 of a mask GeoTIFF. None if absent."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"Mask not found: {path}", path=path)
    if _detect_format(path) is RasterFormat.ARCHIVE:
        *_, mask = _decode_archive(path)
        return None if mask is None else LabelMask(mask)
    rasterio = _rasterio()
    try:
        with rasterio.open(path) as ds:
            return LabelMask(ds.read(1))
    except rasterio.errors.RasterioIOError as e:
        raise CorruptFile(f"Cannot open mask GeoTIFF {path}: {e}", path=path) from e


def save_mask_preview(mask: LabelMask, path):
    """RGBA PNG: FLOOD red, SPRINKLER yellow, OTHER transparent."""
    path = Path(path)
    palette = np.zeros((len(config.CLASS_PALETTE), 4), dtype=np.uint8)
    for code, rgba in config.CLASS_PALETTE.items():
        palette[code] = rgba
    try:
        config.ensure_dir(path.parent)
        Image.fromarray(palette[mask.data]).save(path)
    except OSError as e:
        raise IoError(f"Cannot write preview {path}: {e}", path=path) from e
    return path
