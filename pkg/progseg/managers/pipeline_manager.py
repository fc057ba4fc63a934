"""
End-to-end pipeline: synth -> preprocess -> patchify -> train -> eval -> predict.

Each step is also exposed on its own for the matching cli subcommand. `run_pipeline`
writes everything under one run directory and records every artifact in its manifest.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from ..core import config
from ..core.errors import IoError
from ..core.experiment import ExperimentConfig, config_hash, save_experiment
from ..core.fileio import write_json_atomic
from ..core.run_manager import RunTracker
from .model_manager import load_checkpoint, model_from_checkpoint, save_checkpoint
from .patch_manager import (
    Split,
    build_patch_sets,
    filter_tiles,
    load_patch_set,
    load_tiles,
    read_tile_manifest,
    split_train_val,
)
from .preprocess_manager import ClaheParams, NormalizeParams, preprocess_image
from .raster_manager import load_pair, save_mask, save_mask_preview, save_raster
from .synth_manager import generate_dataset
from .train_manager import (
    evaluate,
    individual_baseline,
    predict_map,
    run_progressive,
    save_history_csv,
)

logger = logging.getLogger(__name__)


# --- Steps ---

def preprocess_tiles(tiles_manifest, out_dir, normalize: NormalizeParams = NormalizeParams(),
                     clahe: Optional[ClaheParams] = ClaheParams(), workers: int = 4) -> Path:
    """Preprocesses every tile of a tiles.json into `out_dir`; returns the new manifest path."""
    tiles_manifest = Path(tiles_manifest)
    out_dir = Path(out_dir)
    manifest = read_tile_manifest(tiles_manifest)

    def _process(entry):
        img, mask = load_pair(tiles_manifest.parent / entry["path"])
        if mask is None:
            raise IoError(f"Tile {entry['path']} carries no mask payload", path=entry["path"])
        out = preprocess_image(img, normalize, clahe)
        rel = f"{entry['tile_id']}{config.ARCHIVE_SUFFIX}"
        save_raster(out, out_dir / rel, mask=mask)
        return {**entry, "path": rel}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        tiles = list(pool.map(_process, manifest["tiles"]))
    out_manifest = out_dir / config.TILE_MANIFEST_NAME
    write_json_atomic(out_manifest, {**manifest, "tiles": tiles, "preprocessed": True})
    logger.info(f"Preprocessed {len(tiles)} tiles into {out_dir}")
    return out_manifest


def patchify_tiles(tiles_manifest, out_root, sizes: Sequence[int], bands: Sequence,
                   tile_other_threshold: float = config.TILE_OTHER_THRESHOLD,
                   patch_other_threshold: float = config.PATCH_OTHER_THRESHOLD,
                   val_ratio: float = config.DEFAULT_VAL_RATIO, seed: int = 0,
                   stride: Optional[int] = None, workers: int = 4):
    """
    Filters tiles, splits the survivors once at tile level and writes one patch set per size.
    Returns ({size: manifest path}, (train ids, val ids)).
    """
    tiles = load_tiles(tiles_manifest, bands, workers)
    kept = filter_tiles([(img, mask, tile_id) for tile_id, img, mask in tiles], tile_other_threshold)
    train_ids, val_ids = split_train_val([t[2] for t in kept], val_ratio, seed)
    manifests = build_patch_sets(tiles, sorted(set(sizes)), (train_ids, val_ids), out_root,
                                 tile_other_threshold, patch_other_threshold, stride)
    write_json_atomic(Path(out_root) / "split.json", {"train": sorted(train_ids), "val": sorted(val_ids)})
    return manifests, (train_ids, val_ids)


def predict_tiles(ckpt_path, tiles_manifest, out_dir, tile_size: int, tile_ids: Optional[Sequence[str]] = None,
                  batch_size: int = config.DEFAULT_BATCH_SIZE) -> list:
    """Writes <tile>.pseg masks plus .png previews; returns the written paths."""
    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt)
    out_dir = Path(out_dir)
    written = []
    for tile_id, img, _ in load_tiles(tiles_manifest, ckpt.bands):
        if tile_ids is not None and tile_id not in tile_ids:
            continue
        mask = predict_map(model, img, tile_size, batch_size)
        written.append(save_mask(mask, out_dir / f"{tile_id}{config.ARCHIVE_SUFFIX}"))
        written.append(save_mask_preview(mask, out_dir / f"{tile_id}.png"))
    logger.info(f"Wrote {len(written) // 2} predicted maps to {out_dir}")
    return written


# --- Full run ---

def run_pipeline(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Runs every step for `cfg` inside its run directory; returns the metrics written to metrics.json."""
    run_dir = cfg.run_dir
    bands = cfg.band_list
    sizes = cfg.plan.sizes
    with RunTracker(run_dir, config_hash(cfg), force=force) as tracker:
        tracker.record("config", save_experiment(cfg, run_dir / "config.json"))

        if cfg.data.source == "synthetic":
            tiles_manifest = generate_dataset(cfg.data.n_tiles, cfg.data.scene, cfg.seed, run_dir / "tiles",
                                              workers=max(1, cfg.workers))
            tracker.record("tiles", tiles_manifest)
        else:
            tiles_manifest = Path(cfg.data.tiles_manifest)
            if not tiles_manifest.is_file():
                raise IoError(f"Tile manifest not found: {tiles_manifest}", path=tiles_manifest)

        pre_manifest = preprocess_tiles(tiles_manifest, run_dir / "preprocessed", cfg.preprocess.normalize,
                                        cfg.preprocess.clahe, workers=max(1, cfg.workers))
        tracker.record("preprocessed", pre_manifest)

        manifests, (_, val_ids) = patchify_tiles(
            pre_manifest, run_dir, sizes, bands,
            cfg.patches.tile_other_threshold, cfg.patches.patch_other_threshold,
            cfg.patches.val_ratio, cfg.seed, cfg.patches.stride, workers=max(1, cfg.workers),
        )
        for size, path in manifests.items():
            tracker.record(f"patches_{size}", path)

        init = load_checkpoint(cfg.model.init_checkpoint) if cfg.model.init_checkpoint else None
        ckpt_dir = run_dir / "checkpoints"
        ckpt, histories = run_progressive(
            cfg.plan, run_dir, bands, cfg.loss, cfg.seed, cfg.augment,
            model_spec=cfg.model.spec(len(bands)), init_checkpoint=init,
            extend_init=cfg.model.extend_init, checkpoint_dir=ckpt_dir, workers=cfg.workers,
        )
        for index, size in enumerate(sizes):
            tracker.record("checkpoint", ckpt_dir / f"stage_{index}_{size}{config.CHECKPOINT_SUFFIX}")
        final_ckpt = tracker.record("checkpoint", save_checkpoint(ckpt, ckpt_dir / f"final{config.CHECKPOINT_SUFFIX}"))
        tracker.record("history", save_history_csv(histories, run_dir / config.HISTORY_CSV_NAME))

        val = load_patch_set(manifests[sizes[-1]], Split.VAL, bands)
        model = model_from_checkpoint(ckpt)
        metrics = {
            "experiment": cfg.name,
            "bands": cfg.bands,
            "plan": sizes,
            "seed": cfg.seed,
            "training": "progressive" if len(sizes) > 1 else "individual",
            "final": evaluate(model, val),
            "stages": [h.summary() for h in histories],
        }

        if cfg.baseline:
            base_dir = run_dir / "baseline"
            base_ckpt, base_histories = run_progressive(
                individual_baseline(cfg.plan), run_dir, bands, cfg.loss, cfg.seed, cfg.augment,
                model_spec=cfg.model.spec(len(bands)), init_checkpoint=init,
                extend_init=cfg.model.extend_init, checkpoint_dir=base_dir, workers=cfg.workers,
            )
            tracker.record("checkpoint", base_dir / f"stage_0_{sizes[-1]}{config.CHECKPOINT_SUFFIX}")
            tracker.record("history", save_history_csv(base_histories, base_dir / config.HISTORY_CSV_NAME))
            metrics["baseline"] = {
                "training": "individual",
                "plan": [sizes[-1]],
                "final": evaluate(model_from_checkpoint(base_ckpt), val),
                "stages": [h.summary() for h in base_histories],
            }

        tracker.record("metrics", write_json_atomic(run_dir / config.METRICS_JSON_NAME, metrics))

        if cfg.predict_tiles:
            chosen = sorted(val_ids)[:cfg.predict_tiles]
            for path in predict_tiles(final_ckpt, pre_manifest, run_dir / "predictions", sizes[-1], chosen):
                tracker.record("prediction", path)

    logger.info(f"Pipeline '{cfg.name}' finished: mIoU {metrics['final']['miou']:.4f}, "
                f"F1 {metrics['final']['f1']:.4f}")
    return metrics
