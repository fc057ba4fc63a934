"""
Experiment configuration: one JSON file describing a whole pipeline run.

Sections missing from the file are filled with defaults (the stage ``plan`` is the only
mandatory key). Every nested section is the dataclass its manager already validates.
"""

import dataclasses
import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import config
from .errors import InvalidConfig, UnsupportedBackbone
from .fileio import read_json, write_json_atomic
from ..managers.loss_manager import LossWeights
from ..managers.model_manager import Backbone, HeadSpec, ModelSpec
from ..managers.preprocess_manager import ClaheParams, NormalizeParams
from ..managers.raster_manager import BandId, band_code, parse_band_code
from ..managers.synth_manager import SceneParams
from ..managers.train_manager import AugmentParams, StageConfig, StagePlan

logger = logging.getLogger(__name__)

DATA_SOURCES = ("synthetic", "tiles")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    # tiles.json of an existing tile set when source == "tiles"
    tiles_manifest: Optional[str] = None
    n_tiles: int = 50
    scene: SceneParams = field(default_factory=SceneParams)

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise InvalidConfig(f"data.source must be one of {DATA_SOURCES}, got '{self.source}'")
        if self.source == "tiles" and not self.tiles_manifest:
            raise InvalidConfig("data.tiles_manifest is required when data.source is 'tiles'")
        if self.source == "synthetic" and self.n_tiles < 2:
            raise InvalidConfig(f"data.n_tiles must be >= 2, got {self.n_tiles}")


@dataclass(frozen=True)
class PreprocessConfig:
    normalize: NormalizeParams = field(default_factory=NormalizeParams)
    clahe: Optional[ClaheParams] = field(default_factory=ClaheParams)


@dataclass(frozen=True)
class PatchConfig:
    tile_other_threshold: float = config.TILE_OTHER_THRESHOLD
    patch_other_threshold: float = config.PATCH_OTHER_THRESHOLD
    val_ratio: float = config.DEFAULT_VAL_RATIO
    stride: Optional[int] = None

    def __post_init__(self):
        for name in ("tile_other_threshold", "patch_other_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"patches.{name} must be in [0, 1]")
        if not 0.0 < self.val_ratio < 1.0:
            raise InvalidConfig(f"patches.val_ratio must be in (0, 1), got {self.val_ratio}")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = config.DEFAULT_BACKBONE
    custom_backbone: Optional[str] = None
    head: HeadSpec = field(default_factory=HeadSpec)
    extend_init: str = "mean"
    # optional checkpoint trained on a band subset, widened before the first stage
    init_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.extend_init not in config.EXTEND_INIT_STRATEGIES:
            raise InvalidConfig(f"model.extend_init must be one of {config.EXTEND_INIT_STRATEGIES}")
        try:
            self.spec(1)
        except UnsupportedBackbone as e:
            raise InvalidConfig(f"model.backbone: {e}") from e

    def spec(self, in_channels: int) -> ModelSpec:
        return ModelSpec(in_channels=in_channels, backbone=self.backbone, head=self.head,
                         custom_backbone=self.custom_backbone)


@dataclass(frozen=True)
class ExperimentConfig:
    plan: StagePlan
    name: str = "experiment"
    seed: int = 0
    bands: str = "RGBNS1S2Th"
    output_dir: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    patches: PatchConfig = field(default_factory=PatchConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    # also train the single-size comparator with the same epoch budget
    baseline: bool = False
    predict_tiles: int = 2
    workers: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bands", band_code(parse_band_code(self.bands)))
        if self.predict_tiles < 0 or self.workers < 0:
            raise InvalidConfig("predict_tiles and workers must be non-negative")

    @property
    def band_list(self) -> list:
        return parse_band_code(self.bands)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else config.RUNS_DIR / self.name


# --- Serialization ---

def _jsonable(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, BandId):
        return value.name
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


def to_dict(cfg: ExperimentConfig) -> dict:
    data = _jsonable(cfg)
    data["plan"] = data.pop("plan")["stages"]
    return data


def _section(cls, data, where: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise InvalidConfig(f"{where} must be an object, got {type(data).__name__}")
    try:
        return cls(**data)
    except TypeError as e:
        raise InvalidConfig(f"{where}: {e}") from e


def from_dict(data: dict) -> ExperimentConfig:
    """Builds a validated ExperimentConfig; absent sections take their defaults."""
    if not isinstance(data, dict):
        raise InvalidConfig("Experiment config must be a JSON object")
    data = json.loads(json.dumps(data))
    if not data.get("plan"):
        raise InvalidConfig("Experiment config has no stage 'plan'")

    plan_entries = [{"patch_size": e} if isinstance(e, int) else e for e in data.pop("plan")]
    stages = tuple(_section(StageConfig, e, "plan[]") for e in plan_entries)

    data_section = data.pop("data", {}) or {}
    data_section.setdefault("scene", {})
    data_section["scene"] = _section(SceneParams, data_section["scene"], "data.scene")

    pre = data.pop("preprocess", {}) or {}
    pre.setdefault("normalize", {})
    pre.setdefault("clahe", {})
    clahe = pre["clahe"]
    if clahe is not None and clahe.get("bands") is not None:
        try:
            clahe["bands"] = tuple(BandId[name] if isinstance(name, str) else BandId(name) for name in clahe["bands"])
        except (KeyError, ValueError) as e:
            raise InvalidConfig(f"preprocess.clahe.bands: unknown band {e}") from e
    preprocess = PreprocessConfig(
        normalize=_section(NormalizeParams, pre["normalize"], "preprocess.normalize"),
        clahe=_section(ClaheParams, clahe, "preprocess.clahe"),
    )

    model = data.pop("model", {}) or {}
    model["head"] = _section(HeadSpec, model.get("head") or {}, "model.head")

    try:
        return ExperimentConfig(
            plan=StagePlan(stages),
            data=_section(DataConfig, data_section, "data"),
            preprocess=preprocess,
            patches=_section(PatchConfig, data.pop("patches", {}) or {}, "patches"),
            augment=_section(AugmentParams, data.pop("augment", {}) or {}, "augment"),
            loss=_section(LossWeights, data.pop("loss", {}) or {}, "loss"),
            model=_section(ModelConfig, model, "model"),
            **data,
        )
    except TypeError as e:
        raise InvalidConfig(f"Experiment config: {e}") from e


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise InvalidConfig(f"Config file not found: {path}", path=path)
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"Config {path} is not valid JSON: {e}", path=path) from e
    cfg = from_dict(data)
    logger.info(f"Loaded experiment '{cfg.name}' from {path} (plan {cfg.plan.sizes}, bands {cfg.bands})")
    return cfg


def save_experiment(cfg: ExperimentConfig, path) -> Path:
    return write_json_atomic(path, to_dict(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of everything except the output location."""
    data = to_dict(cfg)
    data.pop("output_dir", None)
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# --- CLI overrides ---

def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Applies non-None command-line overrides (seed, out, bands, plan, alpha, beta, p_low, p_high,
    clahe_clip, clahe_grid, clahe_bins, backbone, extend_init)."""
    o = {k: v for k, v in overrides.items() if v is not None}
    if not o:
        return cfg
    changes = {}
    if "seed" in o:
        changes["seed"] = int(o["seed"])
    if "out" in o:
        changes["output_dir"] = str(o["out"])
    if "bands" in o:
        changes["bands"] = o["bands"]
    if "plan" in o:
        template = {f.name: getattr(cfg.plan.stages[0], f.name) for f in dataclasses.fields(StageConfig)}
        template.pop("patch_size")
        changes["plan"] = StagePlan.from_sizes(o["plan"], **template)
    if "alpha" in o or "beta" in o:
        changes["loss"] = LossWeights(alpha=o.get("alpha", cfg.loss.alpha), beta=o.get("beta", cfg.loss.beta))
    if "p_low" in o or "p_high" in o:
        changes["preprocess"] = replace(cfg.preprocess, normalize=replace(
            cfg.preprocess.normalize, p_low=o.get("p_low", cfg.preprocess.normalize.p_low),
            p_high=o.get("p_high", cfg.preprocess.normalize.p_high)))
    clahe_keys = {"clahe_clip": "clip_limit", "clahe_grid": "tile_grid", "clahe_bins": "n_bins"}
    clahe_changes = {clahe_keys[k]: v for k, v in o.items() if k in clahe_keys}
    if clahe_changes:
        base = changes.get("preprocess", cfg.preprocess)
        clahe = base.clahe or ClaheParams()
        changes["preprocess"] = replace(base, clahe=replace(clahe, **clahe_changes))
    if "backbone" in o or "extend_init" in o:
        model = cfg.model
        if "backbone" in o:
            name = o["backbone"]
            if name in Backbone.__members__:
                model = replace(model, backbone=name, custom_backbone=None)
            else:
                model = replace(model, backbone=Backbone.CUSTOM.value, custom_backbone=name)
        if "extend_init" in o:
            model = replace(model, extend_init=o["extend_init"])
        changes["model"] = model
    return replace(cfg, **changes)
