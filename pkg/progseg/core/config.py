import os
from pathlib import Path

# --- Base Directories ---
# PROGSEG_CACHE relocates every intermediate artifact (synthetic tiles, patches, logs)
CACHE_DIR = Path(
    os.environ.get(
        'PROGSEG_CACHE',
        Path(os.environ.get('XDG_CACHE_HOME', Path.home() / '.cache')) / 'progseg',
    )
)
LOG_DIR = CACHE_DIR / 'logs'
RUNS_DIR = CACHE_DIR / 'runs'
LOG_FILE_NAME = 'progseg.log'

# --- Bands ---
# Canonical Landsat-style ordering; index == archive band code
CANONICAL_BAND_NAMES = ("BLUE", "GREEN", "RED", "SWIR1", "SWIR2", "NIR", "THERMAL")
# Shorthand tokens for channel ablations ("RGBNS1S2Th")
BAND_CODE_TOKENS = {
    "R": "RED",
    "G": "GREEN",
    "B": "BLUE",
    "N": "NIR",
    "S1": "SWIR1",
    "S2": "SWIR2",
    "Th": "THERMAL",
}
DEFAULT_RESOLUTION_M = 30.0
# Approximate band centres, used by the "nearest" channel-extension init
BAND_WAVELENGTH_NM = {
    "BLUE": 482,
    "GREEN": 562,
    "RED": 655,
    "SWIR1": 1609,
    "SWIR2": 2201,
    "NIR": 865,
    "THERMAL": 10895,
}

# --- Classes ---
CLASS_NAMES = ("OTHER", "FLOOD", "SPRINKLER")
N_CLASSES = len(CLASS_NAMES)
# RGBA palette for PNG previews
CLASS_PALETTE = {
    0: (0, 0, 0, 0),          # OTHER: transparent
    1: (255, 0, 0, 255),      # FLOOD: red
    2: (255, 255, 0, 255),    # SPRINKLER: yellow
}

# --- Archive / Checkpoint Containers ---
ARCHIVE_MAGIC = b"PSEG"
ARCHIVE_VERSION = 1
ARCHIVE_SUFFIX = ".pseg"
GEOTIFF_SUFFIXES = (".tif", ".tiff")
GEOTIFF_VALUE_DOMAIN_TAG = "PROGSEG_VALUE_DOMAIN"
CHECKPOINT_MAGIC = b"PSCK"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".ckpt"

# --- Preprocessing Defaults ---
DEFAULT_P_LOW = 2.0
DEFAULT_P_HIGH = 98.0
DEFAULT_CLAHE_CLIP = 0.01       # fraction of tile pixel count per bin
DEFAULT_CLAHE_GRID = (8, 8)
DEFAULT_CLAHE_BINS = 256
CLAHE_QUANT_MAX = 65535         # internal uint16 quantization ceiling

# --- Patch Geometry ---
TILE_SIZE = 256
PATCH_SIZES = (64, 128, 256)
TILE_OTHER_THRESHOLD = 0.90     # "more than 90% other" tiles are dropped
PATCH_OTHER_THRESHOLD = 0.80    # "over 80% other" patches are dropped
DEFAULT_VAL_RATIO = 127 / 925
PATCH_MANIFEST_NAME = "manifest.jsonl"
PATCH_DIR_TEMPLATE = "patches_{size}"
TILE_MANIFEST_NAME = "tiles.json"

# --- Model ---
DEFAULT_BACKBONE = "SMALL_RESNET"
SMALL_RESNET_WIDTHS = (32, 64, 128, 256)
DEFAULT_HEAD_DROPOUT = 0.1
DEFAULT_HEAD_UPSAMPLE_CHANNELS = 32
DEFAULT_HEAD_BLOCK_CHANNELS = (16, 16)
EXTEND_INIT_STRATEGIES = ("mean", "nearest", "zeros")

# --- Training Defaults ---
DEFAULT_PLAN = (64, 128, 256)
DEFAULT_FROZEN_EPOCHS = 2
DEFAULT_FINETUNE_EPOCHS = 20
DEFAULT_LR_HEAD = 3e-3
DEFAULT_LR_BASE = 3e-4
DEFAULT_BATCH_SIZE = 16
DEFAULT_EARLY_STOP_PATIENCE = 5
BACKBONE_LR_GROUPS = 4

# --- Augmentation Defaults ---
DEFAULT_ROTATION_DEG = (-20.0, 30.0)
DEFAULT_ZOOM = (0.8, 1.3)
DEFAULT_BRIGHTNESS = 0.20
DEFAULT_CONTRAST = 0.20
DEFAULT_TRANSLATION = 0.05

# --- Loss Defaults ---
DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.5
DICE_SMOOTH = 1.0
PROB_EPS = 1e-7

# --- Synthetic Scenes ---
DEFAULT_NOISE_SIGMA = 0.05
DEFAULT_PROFILE_SIGMA = 0.02
# Per-class band means in canonical order (BLUE, GREEN, RED, SWIR1, SWIR2, NIR, THERMAL)
DEFAULT_SPECTRAL_PROFILE = {
    "OTHER": (0.35, 0.38, 0.42, 0.55, 0.48, 0.30, 0.62),
    "FLOOD": (0.28, 0.42, 0.30, 0.34, 0.26, 0.70, 0.44),
    "SPRINKLER": (0.22, 0.48, 0.22, 0.40, 0.30, 0.62, 0.50),
}
DEFAULT_N_PIVOTS = 4
DEFAULT_N_FLOODS = 5
DEFAULT_PIVOT_RADIUS = (16, 36)
DEFAULT_FLOOD_SIDE = (24, 64)
DEFAULT_TEXTURE_AMPLITUDE = 0.06
DEFAULT_TEXTURE_PERIOD = 3.0
DEFAULT_COVERAGE_CAP = 0.60
FIELD_PLACEMENT_ATTEMPTS = 200

# --- Run Artifacts ---
RUN_MANIFEST_NAME = "run_manifest.json"
RUN_LOCK_NAME = "run.lock"
RUN_ERROR_NAME = "error.json"
HISTORY_CSV_NAME = "history.csv"
METRICS_JSON_NAME = "metrics.json"

# --- Exit Codes ---
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_TRAINING_ERROR = 4

# --- Misc ---
APP_NAME = "progseg"


def ensure_dir(path: Path):
    """Creates a directory if it doesn't exist."""
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
        return True
    except OSError:
        return False
